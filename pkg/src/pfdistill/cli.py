"""Command-line entry point: ``pfdistill <subcommand> [options]``.

Options may also come from a ``--config`` file of ``key = value`` lines;
command-line flags win over file values. Exit codes: 0 success, 2 usage
error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import eval_harness as eh
from .distillation import DistillConfig, predict, train, write_log_csv
from .models import Sharing, load_checkpoint, save_checkpoint
from .serving import build_index, flops_count, latency_bench, save_index
from .synthdata import GeneratorConfig, generate, item_catalog, read_jsonl, write_jsonl, write_propensity_csv


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


# (flag, type, default, help); the dest is the flag with dashes turned into underscores
GEN_OPTS = [
    ("--records", int, 220_000, "total records (train + test)"),
    ("--split", int, None, "train records; default is 10/11 of --records"),
    ("--users", int, 2000, "number of users"),
    ("--items", int, 500, "number of items"),
    ("--confound-alpha", float, 1.5, "price confounding strength in the privileged dwell signal"),
    ("--noise-sigma", float, 0.5, "noise on privileged features"),
    ("--task", str, "cvr", "ctr or cvr"),
]
TRAIN_OPTS = [
    ("--method", str, "pfd", "baseline, lupi, md, pfd, pfd_md or mtl"),
    ("--lambda", float, DistillConfig.lam, "distillation weight"),
    ("--swap-step", int, None, "first step using the distillation loss; default 10%% of steps"),
    ("--sharing", str, DistillConfig.sharing.value, "independent, share or share_except_user_id"),
    ("--train-order", str, "sync", "sync or async"),
    ("--epochs", int, DistillConfig.epochs, "passes over the training split"),
    ("--batch-size", int, DistillConfig.batch_size, "examples per step"),
    ("--lr", float, DistillConfig.base_lr, "Adagrad base learning rate"),
    ("--warmup", int, DistillConfig.warmup_steps, "learning-rate warm-up steps"),
    ("--student-seed", int, None, "seed for student initialization; default --seed"),
]
COMPARE_OPTS = [
    ("--methods", _str_list, ("baseline", "lupi", "md", "pfd", "pfd_md"), "comma-separated methods"),
    ("--lambda-grid", _float_list, (DistillConfig.lam,), "comma-separated lambda values"),
    ("--sharings", _str_list, (DistillConfig.sharing.value,), "comma-separated sharing modes"),
    ("--train-orders", _str_list, ("sync",), "comma-separated train orders"),
    ("--seeds", _int_list, (0, 1, 2, 3, 4), "comma-separated seeds"),
    ("--workers", int, 1, "parallel worker processes"),
]


def _add(parser: argparse.ArgumentParser, opts) -> None:
    for flag, typ, _default, helptext in opts:
        parser.add_argument(flag, type=typ, default=None, help=helptext)


def _common(parser: argparse.ArgumentParser, out_required: bool = False, out_help: str = "output directory"):
    parser.add_argument("--config", type=Path, help="file of key = value lines")
    parser.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    parser.add_argument("--out", type=Path, required=out_required, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfdistill", description="Privileged features distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as JSON Lines")
    _common(g, out_required=True)
    _add(g, GEN_OPTS)

    t = sub.add_parser("train", help="train a student (and teacher)")
    _common(t, out_help="root for the run directory (default runs/)")
    t.add_argument("--data", type=Path, help="dataset directory from gen-data; generated in memory if absent")
    t.add_argument("--run-dir", type=Path, help="exact run directory instead of a timestamped one")
    _add(t, GEN_OPTS + TRAIN_OPTS)

    e = sub.add_parser("evaluate", help="test AUC of a checkpoint")
    _common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="dataset directory; generated in memory if absent")
    _add(e, GEN_OPTS)

    c = sub.add_parser("compare", help="run a method grid and emit a comparison table")
    _common(c, out_help="root for the run directory (default runs/)")
    c.add_argument("--run-dir", type=Path)
    _add(c, GEN_OPTS + [o for o in TRAIN_OPTS if o[0] not in ("--method", "--lambda", "--sharing",
                                                             "--train-order", "--student-seed")]
         + COMPARE_OPTS)

    f = sub.add_parser("flops", help="tower mapping flops vs one inner product")
    f.add_argument("--dims", type=_int_list, required=True, help="input,hidden...,output")
    f.add_argument("--report", type=Path, help="write the report as JSON")

    s = sub.add_parser("serve-bench", help="time tower forwards against inner products")
    s.add_argument("--items", type=int, default=1000, help="number of candidates")
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--dims", type=_int_list, default=(1024, 512, 256, 128))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", type=Path, help="write the report as JSON")
    return p


def _option_table(opts_lists) -> dict[str, tuple]:
    table = {"seed": (int, 0)}
    for opts in opts_lists:
        for flag, typ, default, _ in opts:
            table[flag[2:].replace("-", "_")] = (typ, default)
    return table


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def effective_options(ns: argparse.Namespace, opts_lists) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    table = _option_table(opts_lists)
    eff = {k: default for k, (_, default) in table.items()}
    if getattr(ns, "config", None) is not None:
        for key, raw in read_config_file(ns.config).items():
            if key not in table:
                raise UsageError(f"unknown config key '{key}'")
            try:
                eff[key] = table[key][0](raw)
            except ValueError as exc:
                raise UsageError(f"bad value for '{key}': {raw}") from exc
    for key in table:
        value = getattr(ns, key, None)
        if value is not None:
            eff[key] = value
    return eff


def write_config_file(values: dict, path: Path) -> None:
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return "" if v is None else str(v)
    path.write_text("".join(f"{k} = {fmt(v)}\n" for k, v in sorted(values.items()) if v is not None))


def _validated(build):
    def wrapper(eff: dict):
        try:
            return build(eff)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    wrapper.__name__ = build.__name__
    wrapper.__doc__ = build.__doc__
    return wrapper


@_validated
def generator_config(eff: dict) -> GeneratorConfig:
    records = eff["records"]
    split = eff["split"] if eff["split"] is not None else records - records // 11
    return GeneratorConfig(num_users=eff["users"], num_items=eff["items"], num_records=records, split=split,
                           confound_alpha=eff["confound_alpha"], noise_sigma=eff["noise_sigma"],
                           task=eff["task"], seed=eff["seed"])


@_validated
def distill_config(eff: dict) -> DistillConfig:
    return DistillConfig(method=eff["method"], task=eff["task"], lam=eff["lambda"], swap_step=eff["swap_step"],
                         batch_size=eff["batch_size"], epochs=eff["epochs"], seed=eff["seed"],
                         student_seed=eff["student_seed"], sharing=eff["sharing"],
                         train_order=eff["train_order"], base_lr=eff["lr"], warmup_steps=eff["warmup"])


def make_run_dir(eff: dict, ns: argparse.Namespace) -> Path:
    if getattr(ns, "run_dir", None) is not None:
        run = ns.run_dir
    else:
        root = ns.out if ns.out is not None else Path("runs")
        run = root / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{eff['seed']}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def load_data(eff: dict, data_dir: Path | None):
    if data_dir is None:
        gen = generator_config(eff)
        train_ds, test_ds = generate(gen)
        return train_ds, test_ds, gen
    train_ds = read_jsonl(data_dir / "train.jsonl")
    test_ds = read_jsonl(data_dir / "test.jsonl", schema=train_ds.schema)
    return train_ds, test_ds, GeneratorConfig.from_dict(train_ds.config)


def cmd_gen_data(ns) -> int:
    eff = effective_options(ns, [GEN_OPTS])
    gen = generator_config(eff)
    train_ds, test_ds = generate(gen)
    ns.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(train_ds, ns.out / "train.jsonl")
    write_jsonl(test_ds, ns.out / "test.jsonl")
    write_propensity_csv(test_ds, ns.out / "test_propensity.csv")
    write_config_file(eff, ns.out / "config.txt")
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test records to {ns.out}")
    return 0


def cmd_train(ns) -> int:
    eff = effective_options(ns, [GEN_OPTS, TRAIN_OPTS])
    distill_config(eff)
    train_ds, test_ds, gen = load_data(eff, ns.data)
    eff["task"] = gen.task              # a dataset directory fixes the task
    cfg = distill_config(eff)
    run = make_run_dir(eff, ns)
    write_config_file(eff, run / "config.txt")
    result = train(train_ds, cfg)
    write_log_csv(result.log, run / "train_log.csv")
    ckpt_hash = save_checkpoint(result.graph, run / "checkpoint.bin")
    metrics = {"checkpoint_sha256": ckpt_hash, "swap_step": result.swap_step, "steps": len(result.log)}
    s, t = eh.evaluate(result, test_ds)
    metrics.update(student_auc=s, teacher_auc=t)
    if cfg.task == "ctr":
        index = build_index(result.graph, item_catalog(gen, train_ds.schema), ckpt_hash)
        metrics["index_sha256"] = save_index(index, run / "index.bin")
    (run / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    timing = {"total_time_s": result.total_time, "step_time_s": eh.step_time(result)}
    (run / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    print(json.dumps({"run_dir": str(run), **metrics}, sort_keys=True))
    return 0


def cmd_evaluate(ns) -> int:
    eff = effective_options(ns, [GEN_OPTS])
    graph, ckpt_hash = load_checkpoint(ns.checkpoint)
    eff["task"] = graph.config.task
    _, test_ds, _ = load_data(eff, ns.data)
    out = {"checkpoint_sha256": ckpt_hash,
           "student_auc": eh.auc(predict(graph, test_ds, "student"), test_ds.label)}
    if graph.teacher is not None:
        out["teacher_auc"] = eh.auc(predict(graph, test_ds, "teacher"), test_ds.label)
    text = json.dumps(out, sort_keys=True)
    if ns.out is not None:
        ns.out.mkdir(parents=True, exist_ok=True)
        (ns.out / "evaluation.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_compare(ns) -> int:
    opts = [GEN_OPTS, TRAIN_OPTS, COMPARE_OPTS]
    eff = effective_options(ns, opts)
    base = distill_config(eff)
    spec = eh.ExperimentSpec(methods=eff["methods"], sharings=eff["sharings"], train_orders=eff["train_orders"],
                             lambdas=eff["lambda_grid"], seeds=eff["seeds"], base=base,
                             generator=generator_config(eff))
    for order in spec.train_orders:
        for sh in spec.sharings:
            if order == "async" and Sharing.parse(sh) is not Sharing.INDEPENDENT:
                raise UsageError("async training needs --sharings independent")
    run = make_run_dir(eff, ns)
    write_config_file({k: v for k, v in eff.items() if k in _option_table(opts)}, run / "config.txt")
    rows = eh.run_experiment(spec, workers=eff["workers"],
                             progress=lambda r: print(f"  {r.method} {r.sharing} {r.train_order} "
                                                      f"lambda={r.lam} seed={r.seed} "
                                                      f"auc={r.student_auc:.4f}", file=sys.stderr))
    eh.write_rows_csv(rows, run / "comparison.csv")
    table = eh.render_table(rows)
    (run / "table.txt").write_text(table)
    print(table, end="")
    print(f"results in {run}")
    return 0


def cmd_flops(ns) -> int:
    if len(ns.dims) < 2:
        raise UsageError("--dims needs at least input and output widths")
    rep = flops_count(ns.dims[0], ns.dims[1:-1], ns.dims[-1])
    d = rep.to_dict()
    if ns.report is not None:
        ns.report.write_text(json.dumps(d, sort_keys=True) + "\n")
    for k in ("mapping_flops", "inner_product_flops", "ratio"):
        print(f"{k} = {d[k]}")
    return 0


def cmd_serve_bench(ns) -> int:
    if len(ns.dims) < 2:
        raise UsageError("--dims needs at least input and output widths")
    rep = latency_bench(ns.items, ns.repeats, ns.dims[0], ns.dims[1:-1], ns.dims[-1], seed=ns.seed)
    d = rep.to_dict()
    d["flops"] = flops_count(ns.dims[0], ns.dims[1:-1], ns.dims[-1]).to_dict()
    if ns.report is not None:
        ns.report.write_text(json.dumps(d, sort_keys=True) + "\n")
    print(f"mapping {rep.mapping_time_s * 1e3:.3f} ms, inner products {rep.inner_product_time_s * 1e3:.3f} ms, "
          f"ratio {rep.ratio:.1f} ({ns.items} candidates)")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "flops": cmd_flops, "serve-bench": cmd_serve_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"pfdistill {ns.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  surfaced as a runtime failure
        print(f"pfdistill {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
