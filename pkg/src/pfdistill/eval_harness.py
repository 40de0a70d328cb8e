"""AUC, GMV ranking and the experiment grid runner."""
from __future__ import annotations

import csv
import io
import itertools
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .distillation import DistillConfig, TrainResult, iter_batches, predict, train, train_step
from .models import build_model
from .tensor_core import Adagrad
from .synthdata import Dataset, GeneratorConfig, generate

CSV_HEADER = ("method", "sharing", "train_order", "lambda", "seed", "student_auc", "teacher_auc",
              "step_time_s")


class AucUndefined(ValueError):
    pass


def _check_auc_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise AucUndefined("AUC undefined: labels contain a single class")
    return s, y, n_pos, n_neg


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half. Computed from mid-ranks of tied groups using integer
    arithmetic (twice the rank sum), so the result is the exact ratio.
    """
    s, y, n_pos, n_neg = _check_auc_inputs(scores, labels)
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    last = np.cumsum(counts)
    twice_mid_rank = 2 * last - counts + 1           # first + last, 1-based
    pos_per_group = np.bincount(inverse.ravel(), weights=y, minlength=counts.size).astype(np.int64)
    twice_u = int((pos_per_group * twice_mid_rank).sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def auc_pairwise(scores, labels) -> float:
    """O(N^2) reference: count every positive/negative pair directly."""
    s, y, n_pos, n_neg = _check_auc_inputs(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    greater = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * greater + ties) / (2 * n_pos * n_neg)


@dataclass(frozen=True)
class RankedItem:
    item_id: int
    ctr: float
    cvr: float
    price: float
    expected_gmv: float = field(default=None)

    def __post_init__(self):
        if self.price < 0:
            raise ValueError("price must be nonnegative")
        object.__setattr__(self, "expected_gmv", self.ctr * self.cvr * self.price)


def gmv_rank(items: list[RankedItem], k: int) -> list[RankedItem]:
    """Top-k by expected GMV (ctr * cvr * price), ties by ascending item id."""
    if k > len(items):
        raise ValueError(f"k={k} exceeds {len(items)} items")
    return sorted(items, key=lambda it: (-it.expected_gmv, it.item_id))[:k]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    method: str
    sharing: str
    train_order: str
    lam: float
    seed: int
    student_auc: float
    teacher_auc: float | None
    wall_time_per_step: float

    def __post_init__(self):
        for v in (self.student_auc, self.teacher_auc):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"AUC out of range: {v}")

    def csv_row(self) -> list[str]:
        return [self.method, self.sharing, self.train_order, repr(self.lam), str(self.seed),
                repr(self.student_auc), "" if self.teacher_auc is None else repr(self.teacher_auc),
                repr(self.wall_time_per_step)]


@dataclass
class ExperimentSpec:
    methods: tuple[str, ...] = ("baseline", "pfd")
    sharings: tuple[str, ...] = ("share",)
    train_orders: tuple[str, ...] = ("sync",)
    lambdas: tuple[float, ...] = (0.5,)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    base: DistillConfig = field(default_factory=DistillConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def cells(self):
        """Distinct (method, sharing, order, lambda, seed) training runs.

        Teacher-free methods ignore sharing, order and lambda and run once per seed.
        """
        seen = set()
        for m, sh, order, lam, seed in itertools.product(self.methods, self.sharings, self.train_orders,
                                                         self.lambdas, self.seeds):
            cfg = replace(self.base, method=m, sharing=sh, train_order=order, lam=lam, seed=seed)
            if cfg.method in ("baseline", "mtl"):
                cfg = replace(cfg, sharing=self.base.sharing, train_order="sync", lam=0.0)
            key = (cfg.method, cfg.sharing, cfg.train_order, cfg.lam, cfg.seed)
            if key not in seen:
                seen.add(key)
                yield cfg


def step_time(result: TrainResult) -> float:
    """Median per-step seconds over the last 80% of steps."""
    times = result.step_times
    if not times:
        return 0.0
    return float(np.median(times[len(times) // 5:]))


def interleaved_step_times(train_ds: Dataset, cfgs: list[DistillConfig]) -> list[np.ndarray]:
    """Per-step seconds of several synchronous configs trained side by side.

    Every batch is fed to each config in turn, rotating who goes first, so
    machine drift lands on all of them alike. Warm-up (first 20%) is dropped.
    """
    runs = []
    for cfg in cfgs:
        if cfg.train_order != "sync":
            raise ValueError("interleaved timing covers synchronous training only")
        graph = build_model(cfg.model_config(), train_ds.schema)
        graph.set_mode("train")
        runs.append((cfg, graph, Adagrad(graph.all_params(), cfg.base_lr, warmup_steps=cfg.warmup_steps)))
    total = cfgs[0].steps_per_epoch(len(train_ds)) * cfgs[0].epochs
    swap = cfgs[0].resolved_swap_step(total)
    times = [[] for _ in runs]
    for step, (_, batch) in enumerate(iter_batches(train_ds, cfgs[0])):
        for j in range(len(runs)):
            i = (j + step) % len(runs)
            cfg, graph, opt = runs[i]
            t0 = time.perf_counter()
            train_step(batch, graph, cfg, step, opt, swap_step=swap)
            times[i].append(time.perf_counter() - t0)
    return [np.asarray(t[len(t) // 5:]) for t in times]


def evaluate(result: TrainResult, test: Dataset) -> tuple[float, float | None]:
    s = auc(predict(result.graph, test, "student"), test.label)
    t = auc(predict(result.graph, test, "teacher"), test.label) if result.graph.teacher else None
    return s, t


def run_cell(cfg: DistillConfig, gen: GeneratorConfig, data: tuple[Dataset, Dataset] | None = None) -> MetricsRow:
    train_ds, test_ds = data if data is not None else generate(replace(gen, seed=cfg.seed, task=cfg.task))
    result = train(train_ds, cfg)
    s, t = evaluate(result, test_ds)
    return MetricsRow(cfg.method, cfg.sharing.value, cfg.train_order, cfg.lam, cfg.seed, s, t,
                      step_time(result))


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(spec: ExperimentSpec, workers: int = 1, progress=None) -> list[MetricsRow]:
    """Train and evaluate every cell of the grid; rows come back in grid order."""
    cells = list(spec.cells())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell_args, [(c, spec.generator) for c in cells]))
    rows, cache = [], {}
    for cfg in cells:
        if cfg.seed not in cache:
            cache = {cfg.seed: generate(replace(spec.generator, seed=cfg.seed, task=cfg.task))}
        row = run_cell(cfg, spec.generator, cache[cfg.seed])
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_rows_csv(rows: list[MetricsRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def read_rows_csv(path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = []
        for rec in reader:
            m, sh, order, lam, seed, s, t, st = rec
            rows.append(MetricsRow(m, sh, order, float(lam), int(seed), float(s),
                                   float(t) if t else None, float(st)))
    return rows


def summarize(rows: list[MetricsRow]) -> list[dict]:
    """Mean and sample standard deviation per (method, sharing, order, lambda)."""
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.sharing, r.train_order, r.lam), []).append(r)

    def ms(vals):
        vals = [v for v in vals if v is not None]
        if not vals:
            return None, None
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return statistics.fmean(vals), sd

    out = []
    for (m, sh, order, lam), rs in groups.items():
        s_mean, s_sd = ms([r.student_auc for r in rs])
        t_mean, t_sd = ms([r.teacher_auc for r in rs])
        out.append({"method": m, "sharing": sh, "train_order": order, "lambda": lam, "n": len(rs),
                    "student_mean": s_mean, "student_sd": s_sd, "teacher_mean": t_mean,
                    "teacher_sd": t_sd, "step_time_s": statistics.median(r.wall_time_per_step for r in rs)})
    return out


def cell_mean(rows: list[MetricsRow], method: str, attr: str = "student_auc", **match) -> float:
    vals = [getattr(r, attr) for r in rows if r.method == method
            and all(math.isclose(getattr(r, k), v) if isinstance(v, float) else getattr(r, k) == v
                    for k, v in match.items())]
    if not vals or any(v is None for v in vals):
        raise KeyError(f"no {attr} values for {method} {match}")
    return statistics.fmean(vals)


def render_table(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    head = f"{'method':<10}{'sharing':<22}{'order':<7}{'lambda':>7}{'n':>4}{'student':>18}{'teacher':>18}{'ms/step':>9}"
    buf.write(head + "\n" + "-" * len(head) + "\n")
    for s in summarize(rows):
        stu = f"{s['student_mean']:.4f}±{s['student_sd']:.4f}"
        tea = "-" if s["teacher_mean"] is None else f"{s['teacher_mean']:.4f}±{s['teacher_sd']:.4f}"
        buf.write(f"{s['method']:<10}{s['sharing']:<22}{s['train_order']:<7}{s['lambda']:>7.2f}{s['n']:>4}"
                  f"{stu:>18}{tea:>18}{1000 * s['step_time_s']:>9.2f}\n")
    return buf.getvalue()
