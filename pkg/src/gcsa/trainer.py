"""Two-stage training: the projection ``W`` first, then the attention network.

Stage ``projection`` fits ``W`` with the ranking loss applied to cosine
scores of the normalized projections. Stage ``gnn`` freezes ``W`` and fits
the rest; ``joint`` trains everything from scratch (ablation). Each epoch
is deterministic given the seed: example order, dropout masks and radio
dropout all come from one generator seeded by ``(seed, epoch)``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import geometry
from .affinity import NodeData, SideInfoConfig, rssi_to_distance, side_affinity, window_readings
from .dataset import Dataset
from .errors import ConfigError, DataError, NonFiniteError
from .losses import DEFAULT_BINS, DEFAULT_MARGIN, loss_node
from .model import ForwardOptions, GCSAModel, ModelConfig, rerank_order
from .retrieval import ap_from_hits, retrieve_all
from .tensor import Tape, dropout_mask, gradcheck, l2_normalize_rows

STAGES = ("projection", "gnn", "joint")
LABEL_MODES = ("ground-truth", "pos-threshold")
POS_THRESHOLD = 1.0 / 3.0


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "gnn"
    K: int = 64
    L: int = 32
    proj_dim: int = 64
    width: int = 64
    heads: int = 4
    layers: int = 1
    epochs: int = 10
    lr0: float = 1e-4
    lr_decay: float = 0.9
    batch_size: int = 32
    input_dropout: float = 0.2
    attention_dropout: float = 0.2
    radio_dropout: float = 0.0
    weight_decay: float = 0.0
    loss: str = "qap"
    bins: int = DEFAULT_BINS
    margin: float = DEFAULT_MARGIN
    labels: str = "ground-truth"
    max_examples: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.labels not in LABEL_MODES:
            raise ConfigError(f"labels must be one of {LABEL_MODES}, got {self.labels!r}")
        if not 0 <= self.L <= self.K or self.K < 1:
            raise ConfigError(f"need 0 <= L <= K and K >= 1, got K={self.K}, L={self.L}")
        for name in ("input_dropout", "attention_dropout", "radio_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.lr0 < 0 or self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr0 and weight_decay must be non-negative, lr_decay in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.loss not in ("qap", "contrastive"):
            raise ConfigError(f"loss must be 'qap' or 'contrastive', got {self.loss!r}")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** epoch

    def model_config(self, dim: int, side: SideInfoConfig) -> ModelConfig:
        return ModelConfig(dim=dim, proj_dim=self.proj_dim, width=self.width, heads=self.heads,
                           affinity_dim=side.affinity_dim(self.L), K=self.K, L=self.L,
                           layers=self.layers, blocks=side.blocks, query_side=side.query_side)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# context inputs
# ---------------------------------------------------------------------------

class RadioTable:
    """Windowed radio readings of every record as flat arrays.

    Lets radio descriptors be rebuilt per context with reading-level dropout.
    """

    def __init__(self, ds: Dataset, side: SideInfoConfig, causal_splits=("val", "query")):
        reg = ds.registry()
        self.n_endpoints = len(reg)
        self.delta_max = side.delta_max
        starts, ep, dist = [0], [], []
        for r in ds.records:
            for rd in window_readings(r.readings, r.timestamp, side.radio_window,
                                      causal=r.split in causal_splits):
                j = reg.index(rd.endpoint)
                if j is None:
                    reg.unknown_seen += 1
                    continue
                ep.append(j)
                dist.append(min(float(rssi_to_distance(rd.rssi, rd.frequency)), side.delta_max))
            starts.append(len(ep))
        self.starts = np.asarray(starts, dtype=np.int64)
        self.ep = np.asarray(ep, dtype=np.int64)
        self.dist = np.asarray(dist, dtype=np.float64)
        self.unknown_seen = reg.unknown_seen

    def descriptors(self, rows: np.ndarray, rng: np.random.Generator | None = None,
                    dropout: float = 0.0) -> np.ndarray:
        out = np.full((len(rows), self.n_endpoints), self.delta_max)
        lo, hi = self.starts[rows], self.starts[np.asarray(rows) + 1]
        counts = hi - lo
        idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if len(rows) else np.zeros(0, np.int64)
        node = np.repeat(np.arange(len(rows)), counts)
        if dropout > 0 and idx.size:
            keep = rng.random(idx.size) >= dropout
            idx, node = idx[keep], node[keep]
        np.minimum.at(out, (node, self.ep[idx]), self.dist[idx])
        return out


class ContextBuilder:
    """Builds the per-context model inputs (visual block and side blocks)."""

    def __init__(self, ds: Dataset, side: SideInfoConfig, L: int):
        self.ds = ds
        self.side = side
        self.L = L
        self.radio = RadioTable(ds, side) if "rad" in side.blocks else None
        self._unit: np.ndarray | None = None

    def set_projection(self, W: np.ndarray | None) -> None:
        """Cache normalized projected descriptors for a frozen ``W``."""
        if W is None:
            self._unit = None
            return
        self._unit = l2_normalize_rows(self.ds.descriptors @ np.asarray(W, dtype=np.float32).T)

    def visual(self, rows: np.ndarray) -> np.ndarray:
        u = self._unit[rows]
        return np.clip(u @ u[: self.L + 1].T, -1.0, 1.0)

    def side_block(self, rows: np.ndarray, rng: np.random.Generator | None = None,
                   radio_dropout: float = 0.0) -> np.ndarray:
        ds = self.ds
        poses = ds.poses[rows].copy()
        radio = None
        if self.radio is not None:
            radio = self.radio.descriptors(rows, rng, radio_dropout)
        nodes = NodeData(list(ds.ids[rows]), None, poses, radio)
        return side_affinity(nodes, self.L, self.side).astype(np.float32)


@dataclass
class TrainingExample:
    query: int                 # dataset row of the query
    candidates: np.ndarray     # dataset rows, initial order
    labels: np.ndarray         # bool per candidate
    relevant: int = 0          # total relevant items in the database (for AP@k)

    @property
    def rows(self) -> np.ndarray:
        return np.concatenate([[self.query], self.candidates])


def make_examples(ds: Dataset, cfg: TrainConfig, side: SideInfoConfig | None = None,
                  split: str = "db", stats: dict | None = None) -> list[TrainingExample]:
    """Training contexts with database images acting as queries.

    Candidates are the top-``K`` of the initial retrieval among database
    images from other sessions. Examples without any positive candidate are
    dropped and counted in ``stats['dropped']``.
    """
    side = side or SideInfoConfig()
    db = ds.indices("db")
    queries = ds.indices(split)
    if cfg.max_examples is not None and cfg.max_examples < len(queries):
        rng = np.random.default_rng([cfg.seed, 7])
        queries = np.sort(rng.choice(queries, size=cfg.max_examples, replace=False))
    if cfg.labels == "pos-threshold" and not np.all(np.isfinite(ds.poses[db])):
        raise DataError("pos-threshold labels require poses for every database image")
    ctx = retrieve_all(ds.descriptors[queries], ds.ids[queries], ds.descriptors[db], ds.ids[db],
                       cfg.K, query_sessions=ds.sessions[queries], db_sessions=ds.sessions[db])
    out, dropped = [], 0
    for q, c in zip(queries, ctx):
        cand = db[c.index]
        if cfg.labels == "ground-truth":
            lab = ds.relevance([q], cand)[0]
        else:
            if not np.all(np.isfinite(ds.poses[q])):
                raise DataError(f"record {ds.ids[q]}: pos-threshold labels require a query pose")
            lab = geometry.overlap_matrix(ds.poses[[q]], ds.poses[cand], side.fov_radius,
                                          side.fov_angle, side.dz_max)[0] > POS_THRESHOLD
        if not lab.any():
            dropped += 1
            continue
        out.append(TrainingExample(int(q), cand, lab, int(lab.sum())))
    if stats is not None:
        stats["dropped"] = stats.get("dropped", 0) + dropped
    return out


def eval_examples(ds: Dataset, cfg: TrainConfig, split: str = "val") -> list[TrainingExample]:
    """Evaluation contexts from the stored labels (session exclusion included)."""
    db = ds.indices("db")
    queries = ds.indices(split)
    ctx = retrieve_all(ds.descriptors[queries], ds.ids[queries], ds.descriptors[db], ds.ids[db],
                       cfg.K, query_sessions=ds.sessions[queries], db_sessions=ds.sessions[db])
    out = []
    for q, c in zip(queries, ctx):
        rel = set(ds.labels.get(int(ds.ids[q]), ()))
        if not rel:
            continue
        lab = np.array([int(i) in rel for i in c.ids])
        out.append(TrainingExample(int(q), db[c.index], lab, len(rel)))
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update with decoupled multiplicative weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient for {name}: {bad} entries (step {state.t + 1})")
        if name not in params or params[name].shape != g.shape:
            raise ConfigError(f"gradient {name} does not match a parameter")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name in sorted(grads):
        g = grads[name].astype(np.float64)
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        new = p.astype(np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            if weight_decay:
                new *= 1.0 - lr * weight_decay
            new -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            out = new.astype(p.dtype)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"update of {name} overflowed at step {state.t} (lr={lr:g})")
        params[name] = out


# ---------------------------------------------------------------------------
# per-example losses
# ---------------------------------------------------------------------------

def _projection_loss(model: GCSAModel, ds: Dataset, ex: TrainingExample, cfg: TrainConfig,
                     rng: np.random.Generator | None):
    tape = Tape()
    W = tape.param(model.params["W"], name="W")
    x = ds.descriptors[ex.rows]
    if rng is not None and cfg.input_dropout > 0:
        x = x * dropout_mask(x.size, cfg.input_dropout, rng, x.dtype).reshape(x.shape)
    unit = tape.l2_normalize_rows(tape.matmul_t(tape.const(x), W))
    n = len(ex.rows)
    scores = tape.dot_rows(tape.rows(unit, slice(1, n)), tape.rows(unit, slice(0, 1)))
    loss = loss_node(tape, scores, ex.labels, cfg.loss, cfg.bins, cfg.margin)
    tape.backward(loss)
    return float(loss.value.item()), {"W": W.grad}


def _gnn_loss(model: GCSAModel, builder: ContextBuilder, ex: TrainingExample, cfg: TrainConfig,
              rng: np.random.Generator | None, trainable: tuple[str, ...]):
    rows = ex.rows
    side = builder.side_block(rows, rng, cfg.radio_dropout if rng is not None else 0.0)
    tape = Tape()
    p = model.nodes(tape, trainable)
    if "W" in trainable:
        a = model.affinity_node(tape, p, side, descriptors=builder.ds.descriptors[rows])
    else:
        a = model.affinity_node(tape, p, side, visual=builder.visual(rows) if "vis" in model.cfg.blocks else None)
    opts = ForwardOptions(train=rng is not None, input_dropout=cfg.input_dropout,
                          attention_dropout=cfg.attention_dropout, rng=rng)
    refined = model.refine(tape, a, p, opts)
    scores = model.scores_node(tape, refined)
    loss = loss_node(tape, scores, ex.labels, cfg.loss, cfg.bins, cfg.margin)
    tape.backward(loss)
    return float(loss.value.item()), {k: p[k].grad for k in trainable}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def score_example(model: GCSAModel, builder: ContextBuilder, ex: TrainingExample,
                  projection_only: bool = False) -> np.ndarray:
    """Re-ranking score of every candidate of ``ex`` (initial order)."""
    rows = ex.rows
    if projection_only:
        u = builder._unit[rows]
        return u[1:] @ u[0]
    vis = builder.visual(rows) if "vis" in model.cfg.blocks else None
    return model.rerank_scores(builder.side_block(rows), visual=vis)


def rerank_example(model: GCSAModel, builder: ContextBuilder, ex: TrainingExample,
                   projection_only: bool = False) -> np.ndarray:
    """Candidate order (indices into ``ex.candidates``) under the model."""
    return rerank_order(score_example(model, builder, ex, projection_only))


def validation_map(model: GCSAModel, builder: ContextBuilder, examples: list[TrainingExample],
                   k: int = 10, projection_only: bool = False) -> float:
    if not examples:
        return float("nan")
    aps = [ap_from_hits(ex.labels[rerank_example(model, builder, ex, projection_only)], ex.relevant, k)
           for ex in examples]
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GCSAModel
    best_epoch: int
    best_val: float
    log: list[dict]
    dropped: int


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000 + epoch])


def train(ds: Dataset, cfg: TrainConfig, side: SideInfoConfig, init: GCSAModel | None = None,
          log_path: str | Path | None = None, on_epoch: Callable[[int, GCSAModel, AdamState, dict], None] | None = None,
          resume: dict | None = None) -> TrainResult:
    """Run one training stage and return the best-by-validation model.

    ``init`` supplies the stage-1 projection for stage ``gnn``. ``resume``
    (from :func:`load_state`) continues an interrupted run.
    """
    if cfg.stage == "projection":
        side = SideInfoConfig(**{**asdict(side), "blocks": ("vis",), "query_side": ()})
    mcfg = cfg.model_config(ds.dim, side)
    model = GCSAModel(mcfg, seed=cfg.seed, meta={"stage": cfg.stage, "seed": cfg.seed})
    if cfg.stage == "gnn":
        if init is None:
            raise ConfigError("stage gnn needs the projection from a stage-1 checkpoint")
        W = init.params["W"]
        if W.shape != model.params["W"].shape:
            raise ConfigError(f"stage-1 projection has shape {W.shape}, expected {model.params['W'].shape}")
        model.params["W"] = W.copy()
    if cfg.stage == "projection":
        trainable = ("W",)
    elif cfg.stage == "gnn":
        trainable = tuple(n for n in model.params if n != "W")
    else:
        trainable = tuple(model.params)

    stats: dict = {}
    train_ex = make_examples(ds, cfg, side, "db", stats)
    if not train_ex:
        raise DataError("no training example has a positive candidate")
    val_ex = eval_examples(ds, cfg, "val")
    builder = ContextBuilder(ds, side, cfg.L)

    state = AdamState()
    start, log = 0, []
    best = (-math.inf, -1, None)
    if resume is not None:
        model.params = {k: v.copy() for k, v in resume["params"].items()}
        state = resume["adam"]
        start = resume["epoch"] + 1
        log = list(resume["log"])
        best = (resume["best_val"], resume["best_epoch"], resume["best_params"])

    def evaluate_now() -> float:
        builder.set_projection(model.params["W"])
        return validation_map(model, builder, val_ex, projection_only=cfg.stage == "projection")

    builder.set_projection(model.params["W"])
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train_ex))
        lr = cfg.lr(epoch)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            for i in batch:
                ex = train_ex[i]
                if cfg.stage == "projection":
                    value, grads = _projection_loss(model, ds, ex, cfg, rng)
                else:
                    value, grads = _gnn_loss(model, builder, ex, cfg, rng, trainable)
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss diverged at epoch {epoch} (example query row {ex.query})")
                losses.append(value)
                for k, g in grads.items():
                    acc[k] = acc[k] + g if k in acc else g.astype(np.float64)
            for k in acc:
                acc[k] /= len(batch)
            adam_step(model.params, acc, state, lr, cfg.weight_decay)
            if cfg.stage == "joint":
                builder.set_projection(model.params["W"])
        val = evaluate_now()
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                 "val_map10": val, "wall_time": round(time.perf_counter() - t0, 3)}
        log.append(entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        # ties keep the earlier epoch; NaN (no validation queries) keeps the last epoch
        if math.isnan(val) or val > best[0]:
            best = (val, epoch, {k: v.copy() for k, v in model.params.items()})
        if on_epoch is not None:
            on_epoch(epoch, model, state, {"best_val": best[0], "best_epoch": best[1],
                                           "best_params": best[2], "log": log})
    if best[2] is None:
        best = (float("nan"), cfg.epochs - 1, {k: v.copy() for k, v in model.params.items()})
    final = GCSAModel(mcfg, params=best[2],
                      meta={"stage": cfg.stage, "seed": cfg.seed, "best_epoch": best[1],
                            "best_val_map10": best[0], "train_config": asdict(cfg),
                            "side_config": _side_dict(side)})
    return TrainResult(final, best[1], best[0], log, stats.get("dropped", 0))


def _side_dict(side: SideInfoConfig) -> dict:
    d = asdict(side)
    d["blocks"] = list(side.blocks)
    d["query_side"] = list(side.query_side)
    return d


# ---------------------------------------------------------------------------
# resumable state
# ---------------------------------------------------------------------------

def save_state(path: str | Path, epoch: int, model: GCSAModel, adam: AdamState, extra: dict) -> None:
    arrays = {f"p/{k}": v for k, v in model.params.items()}
    arrays.update({f"m/{k}": v for k, v in adam.m.items()})
    arrays.update({f"v/{k}": v for k, v in adam.v.items()})
    if extra["best_params"] is not None:
        arrays.update({f"b/{k}": v for k, v in extra["best_params"].items()})
    info = {"epoch": epoch, "t": adam.t, "best_val": extra["best_val"], "best_epoch": extra["best_epoch"],
            "log": extra["log"]}
    arrays["info"] = np.frombuffer(json.dumps(info).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_state(path: str | Path) -> dict:
    try:
        z = np.load(path)
        info = json.loads(bytes(z["info"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read training state {path}: {exc}") from exc
    pick = lambda pre: {k[2:]: z[k] for k in z.files if k.startswith(pre)}  # noqa: E731
    best = pick("b/") or None
    return {"epoch": info["epoch"], "params": pick("p/"),
            "adam": AdamState(pick("m/"), pick("v/"), info["t"]),
            "best_val": info["best_val"], "best_epoch": info["best_epoch"], "best_params": best,
            "log": info["log"]}


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def gradcheck_instance(seed: int = 0, dtype=np.float64, K: int = 7, L: int = 3, dim: int = 16,
                       proj_dim: int = 8, width: int = 12, heads: int = 2):
    """Finite-difference check of the full loss on a small random context.

    Covers projection, visual and positional affinity, attention, MLP,
    normalization and the quantized-AP loss; returns a GradcheckReport.
    """
    rng = np.random.default_rng(seed)
    mcfg = ModelConfig(dim=dim, proj_dim=proj_dim, width=width, heads=heads,
                       affinity_dim=(L + 1) + L, K=K, L=L, blocks=("vis", "pos"))
    model = GCSAModel(mcfg, seed=seed)
    desc = rng.standard_normal((K + 1, dim))
    side = rng.uniform(0.0, 1.0, (K + 1, L))
    side[0] = 0.0
    scores = model.rerank_scores(side, descriptors=desc)
    for _ in range(100):
        labels = np.zeros(K, dtype=bool)
        labels[rng.choice(K, size=max(1, K // 3), replace=False)] = True
        # a perfectly separated draw sits on a flat stretch of the loss
        if labels.all() or scores[labels].min() <= scores[~labels].max():
            break

    def fn(tape, p):
        a = model.affinity_node(tape, p, side, descriptors=desc)
        refined = model.refine(tape, a, p, ForwardOptions())
        return loss_node(tape, model.scores_node(tape, refined), labels)

    params = {k: v.astype(dtype) for k, v in model.params.items()}
    return gradcheck(fn, params, seed=seed, max_probes=None)
