import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfdistill.distillation import DistillConfig
from pfdistill.eval_harness import (CSV_HEADER, AucUndefined, ExperimentSpec, MetricsRow, RankedItem, auc,
                                    auc_pairwise, cell_mean, gmv_rank, read_rows_csv, render_table,
                                    run_experiment, summarize, write_rows_csv)
from pfdistill.synthdata import GeneratorConfig

labels_and_scores = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
    st.lists(st.integers(-5, 5), min_size=n, max_size=n)))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert auc(np.full(9, 0.3), [1, 0, 1, 1, 0, 0, 0, 1, 0]) == 0.5

    def test_small_hand_example(self):
        # positives 0.8, 0.4; negatives 0.4, 0.1 -> pairs 1 + 1 + 0.5 + 1
        assert auc([0.8, 0.4, 0.4, 0.1], [1, 1, 0, 0]) == 3.5 / 4

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_pairwise_oracle_exactly(self, seed):
        r = np.random.default_rng(seed)
        scores = np.round(r.standard_normal(1000), 1)      # rounding forces many ties
        labels = r.integers(0, 2, 1000)
        assert auc(scores, labels) == auc_pairwise(scores, labels)

    @settings(max_examples=200, deadline=None)
    @given(labels_and_scores)
    def test_oracle_property(self, case):
        y, s = case
        assert auc(s, y) == auc_pairwise(s, y)

    @settings(max_examples=100, deadline=None)
    @given(labels_and_scores)
    def test_monotone_transform_invariance(self, case):
        y, s = case
        s = np.asarray(s, float)
        assert auc(np.exp(s) * 3 + 1, y) == auc(s, y)
        assert auc(s ** 3, y) == auc(s, y)

    @settings(max_examples=100, deadline=None)
    @given(labels_and_scores)
    def test_negation_symmetry(self, case):
        y, s = case
        s = np.asarray(s, float)
        assert auc(s, y) + auc(-s, y) == 1.0

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0, 0]])
    def test_single_class(self, labels):
        with pytest.raises(AucUndefined, match="AUC undefined"):
            auc([0.1, 0.2, 0.3], labels)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 2])
        with pytest.raises(ValueError):
            auc([0.1, np.nan], [1, 0])
        with pytest.raises(ValueError):
            auc([0.1, 0.2, 0.3], [1, 0])


def _items(r, n):
    return [RankedItem(i, float(r.uniform(0.01, 0.99)), float(r.uniform(0.01, 0.99)),
                       float(r.choice([0.0, 1.0, 2.5, 10.0]))) for i in range(n)]


class TestGmvRank:
    def test_expected_gmv(self):
        assert RankedItem(1, 0.2, 0.5, 10.0).expected_gmv == pytest.approx(1.0)

    def test_price_breaks_equal_rates(self):
        a, b = RankedItem(1, 0.1, 0.2, 10.0), RankedItem(2, 0.1, 0.2, 20.0)
        assert [it.item_id for it in gmv_rank([a, b], 2)] == [2, 1]

    def test_zero_price_ranks_last(self):
        items = [RankedItem(0, 0.9, 0.9, 0.0), RankedItem(1, 0.01, 0.01, 1.0), RankedItem(2, 0.5, 0.5, 2.0)]
        assert gmv_rank(items, 3)[-1].item_id == 0

    def test_ties_by_item_id(self):
        items = [RankedItem(i, 0.5, 0.5, 1.0) for i in (7, 3, 5)]
        assert [it.item_id for it in gmv_rank(items, 3)] == [3, 5, 7]

    @pytest.mark.parametrize("seed", range(5))
    def test_full_sort_oracle(self, seed):
        r = np.random.default_rng(seed)
        items = _items(r, 100)
        order = sorted(range(100), key=lambda i: (-items[i].ctr * items[i].cvr * items[i].price, i))
        assert [it.item_id for it in gmv_rank(items, 100)] == order
        assert gmv_rank(items, 10) == gmv_rank(items, 100)[:10]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([0.5, 2.0, 4.0, 1024.0]), st.integers(1, 30))
    def test_price_scale_invariance(self, seed, c, k):
        items = _items(np.random.default_rng(seed), 30)
        scaled = [RankedItem(it.item_id, it.ctr, it.cvr, it.price * c) for it in items]
        assert [it.item_id for it in gmv_rank(items, k)] == [it.item_id for it in gmv_rank(scaled, k)]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            gmv_rank([RankedItem(0, 0.1, 0.1, 1.0)], 2)

    def test_negative_price(self):
        with pytest.raises(ValueError):
            RankedItem(0, 0.1, 0.1, -1.0)


class TestRows:
    def test_auc_range(self):
        with pytest.raises(ValueError):
            MetricsRow("pfd", "share_all", "sync", 0.5, 0, 1.2, None, 0.01)

    def test_csv_round_trip(self, tmp_path):
        rows = [MetricsRow("baseline", "share_all", "sync", 0.0, 0, 0.61234567891, None, 0.0021),
                MetricsRow("pfd", "independent", "async", 0.3, 1, 0.7, 1 / 3, 0.0042)]
        write_rows_csv(rows, tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
        assert read_rows_csv(tmp_path / "c.csv") == rows

    def test_summary_uses_sample_sd(self):
        rows = [MetricsRow("pfd", "share_all", "sync", 0.5, s, a, None, 0.01)
                for s, a in enumerate((0.6, 0.7, 0.8))]
        (s,) = summarize(rows)
        assert s["student_mean"] == pytest.approx(0.7)
        assert s["student_sd"] == pytest.approx(0.1)
        assert cell_mean(rows, "pfd", lam=0.5) == pytest.approx(0.7)
        with pytest.raises(KeyError):
            cell_mean(rows, "pfd", "teacher_auc")
        assert "0.7000±0.1000" in render_table(rows)


class TestExperiment:
    GEN = GeneratorConfig(num_users=60, num_items=40, num_records=1200, split=1000, top_items=10)
    BASE = DistillConfig(emb_dim=4, student_dims=(8, 6), deep_teacher_dims=(10, 8), num_heads=2,
                         head_dim=2, batch_size=50, warmup_steps=5)

    def test_cells_collapse_teacher_free_methods(self):
        spec = ExperimentSpec(methods=("baseline", "pfd"), sharings=("share", "independent"),
                              lambdas=(0.1, 0.9), seeds=(0, 1))
        cells = list(spec.cells())
        assert sum(c.method == "baseline" for c in cells) == 2
        assert sum(c.method == "pfd" for c in cells) == 8

    def test_baseline_single_row(self):
        rows = run_experiment(ExperimentSpec(methods=("baseline",), seeds=(0,), base=self.BASE,
                                             generator=self.GEN))
        assert len(rows) == 1
        assert rows[0].teacher_auc is None and 0 <= rows[0].student_auc <= 1

    def test_lambda_grid_rows_and_reproducibility(self):
        spec = ExperimentSpec(methods=("pfd",), lambdas=(0.1, 0.3, 0.5, 0.7, 0.9), seeds=(0,),
                              base=self.BASE, generator=self.GEN)
        a, b = run_experiment(spec), run_experiment(spec)
        assert [r.lam for r in a] == [0.1, 0.3, 0.5, 0.7, 0.9]
        strip = [(r.method, r.lam, r.student_auc, r.teacher_auc) for r in a]
        assert strip == [(r.method, r.lam, r.student_auc, r.teacher_auc) for r in b]
        assert len({r.teacher_auc for r in a}) > 1     # shared components couple teacher to lambda
