"""Students, teachers and the component-sharing graph between them.

Input components (embedding tables and the behavior encoder) are plain
objects; sharing a component means handing the same object to both models.
A :class:`StepContext` evaluates each distinct component once per step and
sums the gradients it receives from every model that read it.
"""
from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

from pathlib import Path

import numpy as np

from .attention import EVENT_FIELDS, AttentionConfig, BehaviorEncoder, BehaviorSequence
from .synthdata import FeatureSchema
from .tensor_core import (BatchNorm, CacheError, DenseLayer, EmbeddingTable, L2Normalize, LeakyReLU,
                          Param, component_rng)

METHODS = ("baseline", "lupi", "md", "pfd", "pfd_md", "mtl")
TASKS = ("ctr", "cvr")
TWO_TOWER_SCALE = 5.0


class Sharing(str, enum.Enum):
    INDEPENDENT = "independent"
    SHARE_ALL = "share"
    SHARE_EXCEPT_USER_ID = "share_except_user_id"

    @classmethod
    def parse(cls, value) -> "Sharing":
        if isinstance(value, cls):
            return value
        aliases = {"ind": cls.INDEPENDENT, "independent": cls.INDEPENDENT,
                   "share": cls.SHARE_ALL, "share_all": cls.SHARE_ALL,
                   "share*": cls.SHARE_EXCEPT_USER_ID, "share_star": cls.SHARE_EXCEPT_USER_ID,
                   "share_except_user_id": cls.SHARE_EXCEPT_USER_ID}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown sharing mode {value!r}") from None


def normalize_method(method: str) -> str:
    m = method.lower().replace("+", "_").replace("-", "_")
    if m not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return m


class PrivilegedInputError(ValueError):
    """A privileged feature reached a model input that must not see it."""


@dataclass(frozen=True)
class ModelConfig:
    method: str = "baseline"
    task: str = "cvr"
    sharing: Sharing = Sharing.SHARE_ALL
    seed: int = 0
    student_seed: int | None = None
    emb_dim: int = 8
    student_dims: tuple[int, ...] = (64, 32, 16)
    deep_teacher_dims: tuple[int, ...] = (256, 128, 64, 32, 16)
    num_heads: int = 2
    head_dim: int = 8
    mtl_shared_dim: int = 64
    mtl_head_dim: int = 32
    mtl_aux_weight: float = 0.1
    zero_final: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", normalize_method(self.method))
        object.__setattr__(self, "sharing", Sharing.parse(self.sharing))
        object.__setattr__(self, "student_dims", tuple(self.student_dims))
        object.__setattr__(self, "deep_teacher_dims", tuple(self.deep_teacher_dims))
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if len(self.student_dims) < 2:
            raise ValueError("student_dims needs at least two layers")

    @property
    def student_rng_seed(self) -> int:
        return self.seed if self.student_seed is None else self.student_seed

    def to_dict(self) -> dict:
        return {"method": self.method, "task": self.task, "sharing": self.sharing.value,
                "seed": self.seed, "student_seed": self.student_seed, "emb_dim": self.emb_dim,
                "student_dims": list(self.student_dims),
                "deep_teacher_dims": list(self.deep_teacher_dims),
                "num_heads": self.num_heads, "head_dim": self.head_dim,
                "mtl_shared_dim": self.mtl_shared_dim, "mtl_head_dim": self.mtl_head_dim,
                "mtl_aux_weight": self.mtl_aux_weight, "zero_final": self.zero_final}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


FULL_SCALE = dict(student_dims=(512, 256, 128),
                  deep_teacher_dims=(8192, 4096, 2048, 1024, 512, 256, 128),
                  num_heads=4, head_dim=32)


# ---------------------------------------------------------------------------
# per-step evaluation of shared components
# ---------------------------------------------------------------------------

class StepContext:
    """Evaluates each input component at most once per step."""

    def __init__(self, batch: dict, train: bool = True):
        self.batch = batch
        self.train = train
        self._out: dict[int, np.ndarray] = {}
        self._grads: dict[int, list] = {}
        self._order: list = []

    def embed(self, feature: str, table: EmbeddingTable) -> np.ndarray:
        key = id(table)
        if key not in self._out:
            if feature not in self.batch["feats"]:
                raise KeyError(f"batch is missing feature {feature!r}")
            self._out[key] = table.forward(self.batch["feats"][feature])
            self._order.append(table)
        return self._out[key]

    def encode(self, encoder: BehaviorEncoder) -> np.ndarray:
        key = id(encoder)
        if key not in self._out:
            self._out[key] = encoder.forward(self.batch["events"], self.batch["lengths"])
            self._order.append(encoder)
        return self._out[key]

    def add_grad(self, component, grad: np.ndarray) -> None:
        self._grads.setdefault(id(component), []).append(grad)

    def backward(self) -> None:
        for comp in self._order:
            gs = self._grads.get(id(comp))
            if not gs:
                continue
            g = gs[0]
            for extra in gs[1:]:
                g = g + extra
            comp.backward(g)
        self._grads.clear()

    def evaluated(self, component) -> bool:
        return id(component) in self._out


class InputBlock:
    """Concatenation of feature embeddings and, optionally, the behavior encoding."""

    def __init__(self, tables: list[tuple[str, EmbeddingTable]], encoder: BehaviorEncoder | None = None):
        self.tables = list(tables)
        self.encoder = encoder
        self.width = sum(t.dim for _, t in self.tables) + (encoder.out_dim if encoder else 0)
        self._widths = [t.dim for _, t in self.tables]

    @property
    def feature_names(self) -> list[str]:
        return [name for name, _ in self.tables]

    def forward(self, ctx: StepContext) -> np.ndarray:
        parts = [ctx.embed(name, table) for name, table in self.tables]
        if self.encoder is not None:
            parts.append(ctx.encode(self.encoder))
        return np.concatenate(parts, axis=1)

    def backward(self, ctx: StepContext, grad: np.ndarray) -> None:
        start = 0
        for (_, table), w in zip(self.tables, self._widths):
            ctx.add_grad(table, grad[:, start:start + w])
            start += w
        if self.encoder is not None:
            ctx.add_grad(self.encoder, grad[:, start:])


class Mlp:
    """Stack of Dense -> BatchNorm -> LeakyReLU blocks, then a final Dense.

    With ``normalize=True`` the final output is l2-normalized (tower use).
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, rng: np.random.Generator,
                 name: str, normalize: bool = False, zero_final: bool = False):
        self.layers = []
        prev = in_dim
        for i, h in enumerate(hidden):
            self.layers += [DenseLayer(prev, h, rng, f"{name}.dense{i}"), BatchNorm(h, f"{name}.bn{i}"),
                            LeakyReLU()]
            prev = h
        self.layers.append(DenseLayer(prev, out_dim, rng, f"{name}.out", zero_init=zero_final))
        if normalize:
            self.layers.append(L2Normalize())
        self.in_dim, self.out_dim = in_dim, out_dim

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def batch_norms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def dense_layers(self) -> list[DenseLayer]:
        return [layer for layer in self.layers if isinstance(layer, DenseLayer)]


class MlpModel:
    """Input block -> MLP -> one logit per example."""

    def __init__(self, inputs: InputBlock, hidden: tuple[int, ...], rng: np.random.Generator, name: str,
                 zero_final: bool = False):
        self.inputs = inputs
        self.hidden_dims = tuple(hidden)
        self.net = Mlp(inputs.width, hidden, 1, rng, name, zero_final=zero_final)
        self.name = name

    def params(self) -> list[Param]:
        return self.net.params()

    def batch_norms(self) -> list[BatchNorm]:
        return self.net.batch_norms()

    def input_blocks(self) -> list[InputBlock]:
        return [self.inputs]

    def forward(self, ctx: StepContext) -> np.ndarray:
        return self.net.forward(self.inputs.forward(ctx))[:, 0]

    def backward(self, ctx: StepContext, grad_logits: np.ndarray) -> None:
        self.inputs.backward(ctx, self.net.backward(grad_logits[:, None]))


class TwoTowerModel:
    """Scaled inner product of l2-normalized user and item tower outputs."""

    def __init__(self, user_inputs: InputBlock, item_inputs: InputBlock, dims: tuple[int, ...],
                 rng_user: np.random.Generator, rng_item: np.random.Generator, name: str,
                 scale: float = TWO_TOWER_SCALE):
        hidden, out = tuple(dims[:-1]), dims[-1]
        self.user_inputs, self.item_inputs = user_inputs, item_inputs
        self.user_net = Mlp(user_inputs.width, hidden, out, rng_user, f"{name}.user", normalize=True)
        self.item_net = Mlp(item_inputs.width, hidden, out, rng_item, f"{name}.item", normalize=True)
        self.scale = scale
        self.name = name
        self.user_forward_calls = 0
        self._cache = None

    def params(self) -> list[Param]:
        return self.user_net.params() + self.item_net.params()

    def batch_norms(self) -> list[BatchNorm]:
        return self.user_net.batch_norms() + self.item_net.batch_norms()

    def input_blocks(self) -> list[InputBlock]:
        return [self.user_inputs, self.item_inputs]

    def user_vectors(self, ctx: StepContext) -> np.ndarray:
        self.user_forward_calls += 1
        return self.user_net.forward(self.user_inputs.forward(ctx))

    def item_vectors(self, ctx: StepContext) -> np.ndarray:
        return self.item_net.forward(self.item_inputs.forward(ctx))

    def forward(self, ctx: StepContext) -> np.ndarray:
        u = self.user_vectors(ctx)
        i = self.item_vectors(ctx)
        self._cache = (u, i)
        return self.scale * (u * i).sum(axis=1)

    def backward(self, ctx: StepContext, grad_logits: np.ndarray) -> None:
        if self._cache is None:
            raise CacheError(f"{self.name}: backward without forward")
        u, i = self._cache
        self._cache = None
        g = self.scale * grad_logits[:, None]
        self.user_inputs.backward(ctx, self.user_net.backward(g * i))
        self.item_inputs.backward(ctx, self.item_net.backward(g * u))


class MtlModel:
    """Hard parameter sharing: one shared hidden layer, a main head and one
    auxiliary head per privileged feature (auxiliary heads see only the
    shared layer)."""

    def __init__(self, inputs: InputBlock, aux_specs: list[tuple[str, str]], shared_dim: int,
                 head_dim: int, aux_weights: list[float], rng: np.random.Generator, name: str):
        if len(aux_specs) != len(aux_weights):
            raise ValueError("one auxiliary weight per auxiliary head is required")
        self.inputs = inputs
        self.shared = [DenseLayer(inputs.width, shared_dim, rng, f"{name}.shared"),
                       BatchNorm(shared_dim, f"{name}.shared_bn"), LeakyReLU()]
        self.main = Mlp(shared_dim, (head_dim,), 1, rng, f"{name}.main")
        self.aux_specs = list(aux_specs)
        self.aux_heads = [Mlp(shared_dim, (head_dim,), 1, rng, f"{name}.aux_{feat}") for feat, _ in aux_specs]
        self.aux_weights = [float(w) for w in aux_weights]
        self.name = name
        self._nrows = None

    def params(self) -> list[Param]:
        out = [p for layer in self.shared for p in layer.params()] + self.main.params()
        for head in self.aux_heads:
            out += head.params()
        return out

    def batch_norms(self) -> list[BatchNorm]:
        bns = [self.shared[1]] + self.main.batch_norms()
        for head in self.aux_heads:
            bns += head.batch_norms()
        return bns

    def input_blocks(self) -> list[InputBlock]:
        return [self.inputs]

    def forward_all(self, ctx: StepContext) -> tuple[np.ndarray, list[np.ndarray]]:
        h = self.inputs.forward(ctx)
        for layer in self.shared:
            h = layer.forward(h)
        main = self.main.forward(h)[:, 0]
        aux = [head.forward(h)[:, 0] for head in self.aux_heads]
        return main, aux

    def forward(self, ctx: StepContext) -> np.ndarray:
        return self.forward_all(ctx)[0]

    def backward_all(self, ctx: StepContext, grad_main: np.ndarray, grad_aux: list[np.ndarray]) -> None:
        if len(grad_aux) != len(self.aux_heads):
            raise ValueError("auxiliary gradient arity does not match auxiliary heads")
        gh = self.main.backward(grad_main[:, None])
        for head, g in zip(self.aux_heads, grad_aux):
            gh = gh + head.backward(g[:, None])
        for layer in reversed(self.shared):
            gh = layer.backward(gh)
        self.inputs.backward(ctx, gh)

    def backward(self, ctx: StepContext, grad_logits: np.ndarray) -> None:
        self.backward_all(ctx, grad_logits, [np.zeros_like(grad_logits) for _ in self.aux_heads])


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

TEACHER_INPUTS = {"lupi": "privileged_only", "md": "regular_only", "pfd": "regular_plus_privileged",
                  "pfd_md": "regular_plus_privileged"}


@dataclass
class ModelGraph:
    config: ModelConfig
    schema: FeatureSchema
    student: object
    teacher: object | None
    teacher_inputs: str | None
    student_tables: dict[str, EmbeddingTable]
    teacher_tables: dict[str, EmbeddingTable] = field(default_factory=dict)
    student_encoder: BehaviorEncoder | None = None
    teacher_encoder: BehaviorEncoder | None = None

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def sharing(self) -> Sharing:
        return self.config.sharing

    def _component_params(self, tables, encoder) -> list[Param]:
        out = [t.rows for t in tables.values()]
        if encoder is not None:
            out += encoder.params()
        return out

    def student_params(self) -> list[Param]:
        return self._component_params(self.student_tables, self.student_encoder) + self.student.params()

    def teacher_params(self) -> list[Param]:
        if self.teacher is None:
            return []
        return self._component_params(self.teacher_tables, self.teacher_encoder) + self.teacher.params()

    def shared_params(self) -> list[Param]:
        s = {id(p) for p in self.student_params()}
        return [p for p in self.teacher_params() if id(p) in s]

    def teacher_owned_params(self) -> list[Param]:
        s = {id(p) for p in self.student_params()}
        return [p for p in self.teacher_params() if id(p) not in s]

    def all_params(self) -> list[Param]:
        seen, out = set(), []
        for p in self.student_params() + self.teacher_params():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def batch_norms(self) -> list[BatchNorm]:
        bns = list(self.student.batch_norms())
        if self.teacher is not None:
            bns += self.teacher.batch_norms()
        return bns

    def set_mode(self, mode: str, which: str = "all") -> None:
        models = {"student": [self.student], "teacher": [self.teacher] if self.teacher else [],
                  "all": [self.student] + ([self.teacher] if self.teacher else [])}[which]
        for m in models:
            for bn in m.batch_norms():
                bn.state.mode = mode

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        """Every array that defines the model, in a stable order."""
        out = [(p.name, p.value) for p in self.all_params()]
        for i, bn in enumerate(self.batch_norms()):
            out.append((f"{bn.state.gamma.name}.running_mean", bn.state.running_mean))
            out.append((f"{bn.state.gamma.name}.running_var", bn.state.running_var))
        return out


def _tables_for(schema: FeatureSchema, names: list[str], emb_dim: int, seed: int, owner: str):
    return {n: EmbeddingTable(schema[n].vocab_size, emb_dim, component_rng(seed, f"{owner}.{n}"),
                              f"{owner}.{n}") for n in names}


def _encoder(schema: FeatureSchema, cfg: ModelConfig, seed: int, owner: str) -> BehaviorEncoder:
    vocab = {f: schema[f"beh_{f}"].vocab_size for f in EVENT_FIELDS}
    att = AttentionConfig(num_heads=cfg.num_heads, head_dim=cfg.head_dim,
                          model_dim=cfg.emb_dim * len(EVENT_FIELDS), max_len=schema.max_len)
    return BehaviorEncoder(vocab, cfg.emb_dim, att, seed, f"{owner}.behavior")


def build_model(config: ModelConfig, schema: FeatureSchema) -> ModelGraph:
    """Wire student (and teacher) for ``config.method`` on ``config.task``."""
    cfg = config
    method, task = cfg.method, cfg.task
    s_seed, t_seed = cfg.student_rng_seed, cfg.seed
    user_feats = [f.name for f in schema.by_role("regular_user")]
    item_feats = [f.name for f in schema.by_role("regular_item")]
    priv_feats = [f.name for f in schema.privileged(task)]
    if method in ("lupi", "pfd", "pfd_md", "mtl") and not priv_feats:
        raise ValueError(f"method {method} needs privileged features for task {task}")

    s_tables = _tables_for(schema, user_feats + item_feats, cfg.emb_dim, s_seed, "student")
    s_enc = _encoder(schema, cfg, s_seed, "student")
    s_user = InputBlock([(n, s_tables[n]) for n in user_feats], s_enc)
    s_item = InputBlock([(n, s_tables[n]) for n in item_feats])

    if method == "mtl":
        aux = [(f.name, "binary" if f.kind == "binary" else "regression") for f in schema.privileged(task)]
        inputs = InputBlock(s_user.tables + s_item.tables, s_enc)
        student = MtlModel(inputs, aux, cfg.mtl_shared_dim, cfg.mtl_head_dim,
                           [cfg.mtl_aux_weight] * len(aux), component_rng(s_seed, "student.mtl"),
                           "student.mtl")
        return ModelGraph(cfg, schema, student, None, None, s_tables, {}, s_enc, None)

    if task == "ctr":
        student = TwoTowerModel(s_user, s_item, cfg.student_dims, component_rng(s_seed, "student.user_tower"),
                                component_rng(s_seed, "student.item_tower"), "student")
    else:
        student = MlpModel(InputBlock(s_user.tables + s_item.tables, s_enc), cfg.student_dims,
                           component_rng(s_seed, "student.mlp"), "student.mlp", zero_final=cfg.zero_final)

    if method == "baseline":
        return ModelGraph(cfg, schema, student, None, None, s_tables, {}, s_enc, None)

    # teacher components, honoring the sharing mode
    teacher_inputs = TEACHER_INPUTS[method]
    t_tables: dict[str, EmbeddingTable] = {}
    regular = user_feats + item_feats
    needs_regular = teacher_inputs != "privileged_only"
    if needs_regular:
        if cfg.sharing is Sharing.INDEPENDENT:
            t_tables.update(_tables_for(schema, regular, cfg.emb_dim, t_seed, "teacher"))
            t_enc = _encoder(schema, cfg, t_seed, "teacher")
        else:
            t_tables.update({n: s_tables[n] for n in regular})
            t_enc = s_enc
            if cfg.sharing is Sharing.SHARE_EXCEPT_USER_ID:
                # the student keeps a private user-id table; the teacher owns the common one
                t_tables["user_id"] = _tables_for(schema, ["user_id"], cfg.emb_dim, t_seed,
                                                  "teacher")["user_id"]
    else:
        t_enc = None
    t_tables.update(_tables_for(schema, priv_feats, cfg.emb_dim, t_seed, "teacher"))

    t_user = [(n, t_tables[n]) for n in user_feats] if needs_regular else []
    t_item = [(n, t_tables[n]) for n in item_feats] if needs_regular else []
    t_priv = [(n, t_tables[n]) for n in priv_feats]
    deep = method in ("md", "pfd_md")
    dims = cfg.deep_teacher_dims if deep else cfg.student_dims

    if task == "ctr" and method == "pfd":
        teacher = TwoTowerModel(InputBlock(t_user + t_priv, t_enc), InputBlock(t_item), dims,
                                component_rng(t_seed, "teacher.user_tower"),
                                component_rng(t_seed, "teacher.item_tower"), "teacher")
    else:
        teacher = MlpModel(InputBlock(t_user + t_item + t_priv, t_enc), dims,
                           component_rng(t_seed, "teacher.mlp"), "teacher.mlp", zero_final=cfg.zero_final)
    return ModelGraph(cfg, schema, student, teacher, teacher_inputs, s_tables, t_tables, s_enc, t_enc)


# ---------------------------------------------------------------------------
# single-request forwards
# ---------------------------------------------------------------------------

def _request_batch(graph: ModelGraph, feats: dict, behavior: BehaviorSequence | None) -> dict:
    batch_feats = {}
    for name, value in feats.items():
        arr = np.atleast_1d(np.asarray(value))
        batch_feats[name] = graph.schema.encode(name, arr)
    seq = behavior if behavior is not None else BehaviorSequence()
    events, n = seq.to_arrays(graph.schema.max_len)
    return {"feats": batch_feats, "events": events, "lengths": np.array([n])}


def _check_no_privileged(graph: ModelGraph, feats: dict) -> None:
    priv = {f.name for f in graph.schema.by_role("privileged")}
    leaked = priv.intersection(feats)
    if leaked:
        raise PrivilegedInputError(f"student received privileged feature(s) {sorted(leaked)}")


def student_forward_ctr(user_feats: dict, behavior: BehaviorSequence, item_feats: dict,
                        graph: ModelGraph) -> float:
    """Eval-mode two-tower logit for one (user, item) pair."""
    if not isinstance(graph.student, TwoTowerModel):
        raise TypeError("student_forward_ctr needs a two-tower student")
    _check_no_privileged(graph, user_feats)
    _check_no_privileged(graph, item_feats)
    graph.set_mode("eval", "student")
    ctx = StepContext(_request_batch(graph, {**user_feats, **item_feats}, behavior), train=False)
    return float(graph.student.forward(ctx)[0])


def teacher_forward(regular_feats: dict, privileged_feats: dict, behavior: BehaviorSequence | None,
                    graph: ModelGraph) -> float:
    """Eval-mode teacher logit for one example."""
    if graph.teacher is None:
        raise ValueError(f"method {graph.method} has no teacher")
    wanted = {f.name for f in graph.schema.privileged(graph.config.task)}
    if graph.teacher_inputs == "privileged_only" and regular_feats:
        raise ValueError("LUPI teacher accepts privileged features only")
    if graph.teacher_inputs != "regular_only":
        missing = wanted - set(privileged_feats)
        if missing:
            raise PrivilegedInputError(f"teacher is missing privileged feature(s) {sorted(missing)}")
    graph.set_mode("eval", "teacher")
    ctx = StepContext(_request_batch(graph, {**regular_feats, **privileged_feats}, behavior), train=False)
    return float(graph.teacher.forward(ctx)[0])


def mtl_forward(regular_feats: dict, behavior: BehaviorSequence | None, graph: ModelGraph):
    if not isinstance(graph.student, MtlModel):
        raise TypeError("mtl_forward needs an MTL model")
    _check_no_privileged(graph, regular_feats)
    graph.set_mode("eval", "student")
    ctx = StepContext(_request_batch(graph, regular_feats, behavior), train=False)
    main, aux = graph.student.forward_all(ctx)
    return float(main[0]), [float(a[0]) for a in aux]


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PFDCKPT1"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(graph: ModelGraph) -> bytes:
    """Deterministic dump: magic, header length, JSON header, little-endian float64 payload."""
    state = graph.named_state()
    header = {
        "version": 1,
        "config": graph.config.to_dict(),
        "schema": graph.schema.to_dict(),
        "schema_hash": graph.schema.hash(),
        "arrays": [[name, list(np.shape(arr))] for name, arr in state],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in state)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload


def checkpoint_hash(graph: ModelGraph) -> str:
    return hashlib.sha256(checkpoint_bytes(graph)).hexdigest()


def save_checkpoint(graph: ModelGraph, path) -> str:
    data = checkpoint_bytes(graph)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[ModelGraph, str]:
    """Rebuild the graph from the stored config and schema, then restore every array."""
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    schema = FeatureSchema.from_dict(header["schema"])
    if schema.hash() != header["schema_hash"]:
        raise CheckpointError("schema hash mismatch")
    graph = build_model(ModelConfig.from_dict(header["config"]), schema)
    state = graph.named_state()
    if [n for n, _ in state] != [n for n, _ in header["arrays"]]:
        raise CheckpointError("checkpoint layout does not match the rebuilt model")
    for (name, arr), (_, shape) in zip(state, header["arrays"]):
        if list(arr.shape) != shape:
            raise CheckpointError(f"{name}: shape {shape} does not match {list(arr.shape)}")
        count = int(np.prod(shape))
        arr[...] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return graph, hashlib.sha256(data).hexdigest()
