"""Teacher/student training: the synchronous distillation loop and its variants.

Per step the student minimizes ``L_s`` until ``swap_step`` and
``(1 - lam) * L_s + lam * L_d`` afterwards; the teacher only ever sees
``L_t``. Components shared between the two models receive the sum of both
gradients and a single optimizer update.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .models import (MtlModel, ModelConfig, ModelGraph, Sharing, StepContext, build_model,
                     normalize_method)
from .synthdata import Dataset
from .tensor_core import Adagrad, component_rng, logistic_loss, mse_loss, sigmoid

log = logging.getLogger(__name__)

TRAIN_ORDERS = ("sync", "async")
LOG_COLUMNS = ("step", "L_s", "L_t", "L_d", "combined", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DistillConfig:
    method: str = "pfd"
    task: str = "cvr"
    lam: float = 0.5
    swap_step: int | None = None
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    student_seed: int | None = None
    sharing: Sharing = Sharing.SHARE_ALL
    train_order: str = "sync"
    base_lr: float = 0.1
    warmup_steps: int = 100
    emb_dim: int = 8
    student_dims: tuple[int, ...] = (64, 32, 16)
    deep_teacher_dims: tuple[int, ...] = (256, 128, 64, 32, 16)
    num_heads: int = 2
    head_dim: int = 8
    mtl_aux_weight: float = 0.1

    def __post_init__(self):
        self.method = normalize_method(self.method)
        self.sharing = Sharing.parse(self.sharing)
        self.train_order = str(self.train_order).lower()
        self.student_dims = tuple(self.student_dims)
        self.deep_teacher_dims = tuple(self.deep_teacher_dims)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.swap_step is not None and self.swap_step < 0:
            raise ValueError("swap_step must be >= 0")
        if self.train_order not in TRAIN_ORDERS:
            raise ValueError(f"train_order must be one of {TRAIN_ORDERS}")
        if self.batch_size < 2 or self.epochs < 1:
            raise ValueError("batch_size >= 2 and epochs >= 1 are required")
        if self.train_order == "async" and self.sharing is not Sharing.INDEPENDENT \
                and self.method not in ("baseline", "mtl", "lupi"):
            raise ValueError("async training needs independent input components")

    def model_config(self) -> ModelConfig:
        return ModelConfig(method=self.method, task=self.task, sharing=self.sharing, seed=self.seed,
                           student_seed=self.student_seed, emb_dim=self.emb_dim,
                           student_dims=self.student_dims, deep_teacher_dims=self.deep_teacher_dims,
                           num_heads=self.num_heads, head_dim=self.head_dim,
                           mtl_aux_weight=self.mtl_aux_weight)

    def steps_per_epoch(self, n: int) -> int:
        return n // self.batch_size

    def resolved_swap_step(self, total_steps: int) -> int:
        return total_steps // 10 if self.swap_step is None else self.swap_step

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sharing"] = self.sharing.value
        d["student_dims"] = list(self.student_dims)
        d["deep_teacher_dims"] = list(self.deep_teacher_dims)
        return d


@dataclass
class LossBreakdown:
    L_s: float | None
    L_t: float | None
    L_d: float | None
    combined: float | None
    lr: float = 0.0
    step: int = 0

    def row(self) -> dict:
        return {"step": self.step, "L_s": self.L_s, "L_t": self.L_t, "L_d": self.L_d,
                "combined": self.combined, "lr": self.lr}


@dataclass
class TrainResult:
    graph: ModelGraph
    config: DistillConfig
    log: list[LossBreakdown] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    step_times: list[float] = field(default_factory=list)
    teacher_step_times: list[float] = field(default_factory=list)
    total_time: float = 0.0
    swap_step: int = 0


def distillation_loss(teacher_logits, student_logits) -> tuple[float, np.ndarray]:
    """Cross entropy of the student against the teacher's soft labels.

    Teacher logits are constants here: only the student gradient is returned.
    """
    t = np.asarray(teacher_logits, dtype=np.float64).ravel()
    s = np.asarray(student_logits, dtype=np.float64).ravel()
    if t.shape != s.shape:
        raise ValueError(f"distillation_loss: {t.shape} teacher vs {s.shape} student logits")
    return logistic_loss(s, sigmoid(t))


def _check_finite(values, step: int, cfg: DistillConfig, batch: dict) -> None:
    for v in values:
        if v is not None and not math.isfinite(v):
            first = int(batch["index"][0]) if "index" in batch else -1
            raise TrainingDiverged(f"non-finite loss at step {step} (batch starting at record {first}, "
                                   f"seed {cfg.seed}, method {cfg.method})")


def _mtl_step(batch, graph: ModelGraph, ctx: StepContext):
    model: MtlModel = graph.student
    main, aux = model.forward_all(ctx)
    L_main, g_main = logistic_loss(main, batch["label"])
    total = L_main
    g_aux = []
    for (feat, kind), pred, w in zip(model.aux_specs, aux, model.aux_weights):
        target = np.asarray(batch["raw"][feat], dtype=np.float64)
        loss, g = logistic_loss(pred, target) if kind == "binary" else mse_loss(pred, target)
        total += w * loss
        g_aux.append(w * g)
    model.backward_all(ctx, g_main, g_aux)
    return L_main, total


def train_step(batch: dict, graph: ModelGraph, cfg: DistillConfig, step: int, optimizer: Adagrad,
               swap_step: int = 0, teacher_frozen: bool = False, student: bool = True) -> LossBreakdown:
    """One optimizer step on ``batch``; ``step`` is the 0-based global step."""
    ctx = StepContext(batch)
    y = batch["label"]
    L_s = L_t = L_d = combined = None
    if student and graph.method == "mtl":
        L_s, combined = _mtl_step(batch, graph, ctx)
    else:
        f_s = g_s = None
        if student:
            f_s = graph.student.forward(ctx)
            L_s, g_s = logistic_loss(f_s, y)
            combined, g_student = L_s, g_s
        if graph.teacher is not None:
            f_t = graph.teacher.forward(ctx)
            L_t, g_t = logistic_loss(f_t, y)
            if student and step >= swap_step:
                lam = cfg.lam
                L_d, g_d = distillation_loss(f_t, f_s)
                combined = (1.0 - lam) * L_s + lam * L_d
                g_student = (1.0 - lam) * g_s + lam * g_d
        if student:
            graph.student.backward(ctx, g_student)
        if graph.teacher is not None and not teacher_frozen:
            graph.teacher.backward(ctx, g_t)
    ctx.backward()
    _check_finite((L_s, L_t, L_d, combined), step, cfg, batch)
    lr = optimizer.step()
    return LossBreakdown(L_s, L_t, L_d, combined, lr, step)


def batch_order(n: int, cfg: DistillConfig, epoch: int) -> np.ndarray:
    return component_rng(cfg.seed, f"data_order.{epoch}").permutation(n)


def iter_batches(train: Dataset, cfg: DistillConfig):
    n = len(train)
    per_epoch = cfg.steps_per_epoch(n)
    if per_epoch < 1:
        raise ValueError("dataset smaller than one batch")
    for epoch in range(cfg.epochs):
        order = batch_order(n, cfg, epoch)
        for b in range(per_epoch):
            yield epoch, train.batch(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])


def _epoch_summary(rows: list[LossBreakdown], epoch: int) -> dict:
    def mean(attr):
        vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None
    return {"epoch": epoch, "L_s": mean("L_s"), "L_t": mean("L_t"), "L_d": mean("L_d"),
            "combined": mean("combined")}


def _check_dataset(train: Dataset, cfg: DistillConfig) -> None:
    if cfg.method in ("lupi", "pfd", "pfd_md", "mtl"):
        needed = [f.name for f in train.schema.privileged(cfg.task)]
        missing = [n for n in needed if n not in train.cols]
        if not needed or missing:
            raise ValueError(f"method {cfg.method} needs privileged features; missing {missing or needed}")


def _run(train: Dataset, graph: ModelGraph, cfg: DistillConfig, optimizer: Adagrad, swap_step: int,
         result: TrainResult, *, student: bool, teacher_frozen: bool, step_offset: int,
         times: list[float]) -> int:
    step = 0
    epoch_rows: list[LossBreakdown] = []
    current = 0
    for epoch, batch in iter_batches(train, cfg):
        if epoch != current and epoch_rows:
            result.epochs.append(_epoch_summary(epoch_rows, current))
            epoch_rows, current = [], epoch
        t0 = time.perf_counter()
        row = train_step(batch, graph, cfg, step, optimizer, swap_step=swap_step,
                         teacher_frozen=teacher_frozen, student=student)
        times.append(time.perf_counter() - t0)
        row.step = step + step_offset
        result.log.append(row)
        epoch_rows.append(row)
        step += 1
    if epoch_rows:
        result.epochs.append(_epoch_summary(epoch_rows, current))
    return step


def train(train_ds: Dataset, cfg: DistillConfig, graph: ModelGraph | None = None) -> TrainResult:
    """Train per ``cfg``; returns the graph with its per-step log."""
    _check_dataset(train_ds, cfg)
    if graph is None:
        graph = build_model(cfg.model_config(), train_ds.schema)
    total = cfg.steps_per_epoch(len(train_ds)) * cfg.epochs
    swap = cfg.resolved_swap_step(total)
    result = TrainResult(graph, cfg, swap_step=swap)
    start = time.perf_counter()
    graph.set_mode("train")
    if cfg.train_order == "sync" or graph.teacher is None:
        opt = Adagrad(graph.all_params(), cfg.base_lr, warmup_steps=cfg.warmup_steps)
        _run(train_ds, graph, cfg, opt, swap, result, student=True, teacher_frozen=False,
             step_offset=0, times=result.step_times)
    else:
        # teacher first, to completion; then the student against the frozen teacher
        opt_t = Adagrad(graph.teacher_params(), cfg.base_lr, warmup_steps=cfg.warmup_steps)
        done = _run(train_ds, graph, cfg, opt_t, total, result, student=False, teacher_frozen=False,
                    step_offset=0, times=result.teacher_step_times)
        graph.set_mode("eval", "teacher")
        opt_s = Adagrad(graph.student_params(), cfg.base_lr, warmup_steps=cfg.warmup_steps)
        result.swap_step = 0
        _run(train_ds, graph, cfg, opt_s, 0, result, student=True, teacher_frozen=True,
             step_offset=done, times=result.step_times)
    result.total_time = time.perf_counter() - start
    graph.set_mode("eval")
    return result


def train_teacher_only(train_ds: Dataset, cfg: DistillConfig) -> ModelGraph:
    """Train just the teacher of ``cfg`` (the first phase of async training)."""
    graph = build_model(cfg.model_config(), train_ds.schema)
    if graph.teacher is None:
        raise ValueError(f"method {cfg.method} has no teacher")
    total = cfg.steps_per_epoch(len(train_ds)) * cfg.epochs
    graph.set_mode("train")
    opt = Adagrad(graph.teacher_params(), cfg.base_lr, warmup_steps=cfg.warmup_steps)
    _run(train_ds, graph, cfg, opt, total, TrainResult(graph, cfg), student=False, teacher_frozen=False,
         step_offset=0, times=[])
    graph.set_mode("eval")
    return graph


def predict(graph: ModelGraph, ds: Dataset, which: str = "student", batch_size: int = 4096) -> np.ndarray:
    """Eval-mode logits for every record of ``ds``."""
    model = graph.student if which == "student" else graph.teacher
    if model is None:
        raise ValueError(f"graph has no {which}")
    graph.set_mode("eval")
    out = []
    for start in range(0, len(ds), batch_size):
        ctx = StepContext(ds.batch(np.arange(start, min(start + batch_size, len(ds)))), train=False)
        out.append(model.forward(ctx))
    return np.concatenate(out)


def write_log_csv(rows: list[LossBreakdown], path) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.step, fmt(r.L_s), fmt(r.L_t), fmt(r.L_d), fmt(r.combined), fmt(r.lr)])


def with_changes(cfg: DistillConfig, **kw) -> DistillConfig:
    return replace(cfg, **kw)
