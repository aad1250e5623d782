"""The learnable re-ranker.

Descriptors are projected by ``W`` and turned into visual affinities against
the anchor set; side-information blocks are appended; the affinity matrix is
mapped to width ``dbar`` by ``W_in`` and refined by self-attention layers
(pre-attention layer norm, residual MLP with a GELU hidden layer). The
refined rows are L2-normalized and candidates are re-ranked by cosine
similarity to the refined query row.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, ConfigError
from .tensor import Node, Tape, dropout_mask, l2_normalize_rows

FORMAT_NAME = "gcsa-checkpoint"
FORMAT_VERSION = 1
_MAGIC = b"GCSACKPT"


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of one model instance."""

    dim: int                 # raw descriptor dimension D
    proj_dim: int            # D0
    width: int               # D-bar
    heads: int
    affinity_dim: int        # D_a
    K: int
    L: int
    layers: int = 1
    mlp_ratio: int = 4
    blocks: tuple[str, ...] = ("vis",)
    query_side: tuple[str, ...] = ()

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.L > self.K:
            raise ConfigError(f"L={self.L} exceeds K={self.K}")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "query_side", tuple(self.query_side))

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.width


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""
    w, h = cfg.width, cfg.hidden
    shapes = [("W", (cfg.proj_dim, cfg.dim)), ("W_in", (w, cfg.affinity_dim))]
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes += [
            (p + "ln1_g", (w,)), (p + "ln1_b", (w,)),
            (p + "Wq", (w, w)), (p + "bq", (w,)),
            (p + "Wk", (w, w)), (p + "bk", (w,)),
            (p + "Wv", (w, w)), (p + "bv", (w,)),
            (p + "Wo", (w, w)), (p + "bo", (w,)),
            (p + "ln2_g", (w,)), (p + "ln2_b", (w,)),
            (p + "W1", (h, w)), (p + "b1", (h,)),
            (p + "W2", (w, h)), (p + "b2", (w,)),
        ]
    return shapes


def count_parameters(cfg: ModelConfig, include_projection: bool = True) -> int:
    return sum(int(np.prod(s)) for n, s in param_shapes(cfg) if include_projection or n != "W")


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Semi-orthogonal ``W`` (cosines roughly preserved), Xavier-uniform matrices, zero biases."""
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name == "W":
            q, _ = np.linalg.qr(rng.standard_normal((max(shape), min(shape))))
            params[name] = np.ascontiguousarray(q if shape[0] >= shape[1] else q.T, dtype=dtype)
        elif len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
        elif leaf.endswith("_g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


@dataclass
class ForwardOptions:
    train: bool = False
    input_dropout: float = 0.0
    attention_dropout: float = 0.0
    rng: np.random.Generator | None = None


class GCSAModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, meta: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        self.meta = dict(meta or {})
        expected = dict(param_shapes(cfg))
        if set(self.params) != set(expected):
            raise ConfigError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    # -- building blocks ---------------------------------------------------
    def project(self, descriptors: np.ndarray) -> np.ndarray:
        """Rows of ``descriptors`` mapped by ``W``."""
        return np.asarray(descriptors) @ self.params["W"].T

    def visual_block(self, tape: Tape, desc: Node, W: Node) -> Node:
        """Cosine affinities of every node against anchors ``0..L`` on the tape."""
        unit = tape.l2_normalize_rows(tape.matmul_t(desc, W))
        anchors = tape.rows(unit, slice(0, self.cfg.L + 1))
        return tape.matmul_t(unit, anchors)

    def _layer(self, tape: Tape, x: Node, p: dict[str, Node], prefix: str, opts: ForwardOptions) -> Node:
        cfg = self.cfg
        dh = cfg.width // cfg.heads
        h = tape.layer_norm_rows(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
        q = tape.add(tape.matmul_t(h, p[prefix + "Wq"]), p[prefix + "bq"])
        k = tape.add(tape.matmul_t(h, p[prefix + "Wk"]), p[prefix + "bk"])
        v = tape.add(tape.matmul_t(h, p[prefix + "Wv"]), p[prefix + "bv"])
        n = x.value.shape[0]
        outs = []
        for head in range(cfg.heads):
            s, e = head * dh, (head + 1) * dh
            logits = tape.scale(tape.matmul_t(tape.cols(q, s, e), tape.cols(k, s, e)), 1.0 / math.sqrt(dh))
            att = tape.softmax_rows(logits)
            if opts.train and opts.attention_dropout > 0:
                mask = dropout_mask(n * n, opts.attention_dropout, opts.rng, x.value.dtype)
                att = tape.mul_const(att, mask.reshape(n, n))
            outs.append(tape.matmul(att, tape.cols(v, s, e)))
        heads = outs[0] if len(outs) == 1 else tape.concat_cols(outs)
        m = tape.add(tape.matmul_t(heads, p[prefix + "Wo"]), p[prefix + "bo"])
        y = tape.add(x, m)
        z = tape.layer_norm_rows(y, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
        hid = tape.gelu(tape.add(tape.matmul_t(z, p[prefix + "W1"]), p[prefix + "b1"]))
        return tape.add(y, tape.add(tape.matmul_t(hid, p[prefix + "W2"]), p[prefix + "b2"]))

    def refine(self, tape: Tape, affinity: Node, p: dict[str, Node], opts: ForwardOptions) -> Node:
        """Affinity matrix (N, D_a) -> unit-norm refined descriptors (N, width)."""
        if affinity.value.shape[1] != self.cfg.affinity_dim:
            raise ConfigError(
                f"affinity width {affinity.value.shape[1]} does not match model D_a={self.cfg.affinity_dim}"
            )
        if opts.train and opts.input_dropout > 0:
            n, d = affinity.value.shape
            mask = dropout_mask(n * d, opts.input_dropout, opts.rng, affinity.value.dtype)
            affinity = tape.mul_const(affinity, mask.reshape(n, d))
        x = tape.matmul_t(affinity, p["W_in"])
        for l in range(self.cfg.layers):
            x = self._layer(tape, x, p, f"layer{l}.", opts)
        return tape.l2_normalize_rows(x)

    def affinity_node(self, tape: Tape, p: dict[str, Node], side: np.ndarray,
                      descriptors: np.ndarray | None = None, visual: np.ndarray | None = None) -> Node:
        """Assemble the affinity matrix on the tape.

        Pass ``visual`` (precomputed, constant) when ``W`` is frozen, or raw
        ``descriptors`` to route gradients into ``W``.
        """
        parts = []
        if "vis" in self.cfg.blocks:
            if visual is not None:
                parts.append(tape.const(visual.astype(p["W_in"].value.dtype)))
            else:
                dtype = p["W"].value.dtype
                parts.append(self.visual_block(tape, tape.const(np.asarray(descriptors, dtype=dtype)), p["W"]))
        if side is not None and side.shape[1]:
            parts.append(tape.const(np.asarray(side, dtype=p["W_in"].value.dtype)))
        return parts[0] if len(parts) == 1 else tape.concat_cols(parts)

    def scores_node(self, tape: Tape, refined: Node) -> Node:
        """Cosine of each candidate's refined row with the refined query -> (K, 1)."""
        n = refined.value.shape[0]
        return tape.dot_rows(tape.rows(refined, slice(1, n)), tape.rows(refined, slice(0, 1)))

    # -- inference ---------------------------------------------------------
    def nodes(self, tape: Tape, trainable: tuple[str, ...] = ()) -> dict[str, Node]:
        return {k: (tape.param(v, name=k) if k in trainable else tape.const(v)) for k, v in self.params.items()}

    def forward(self, side: np.ndarray, descriptors: np.ndarray | None = None,
                visual: np.ndarray | None = None, opts: ForwardOptions | None = None) -> np.ndarray:
        """Refined descriptors (N, width) for one context, no gradients."""
        opts = opts or ForwardOptions()
        tape = Tape()
        p = self.nodes(tape)
        if visual is None and "vis" in self.cfg.blocks:
            visual = self.visual_affinity(descriptors)
        a = self.affinity_node(tape, p, side, visual=visual)
        return self.refine(tape, a, p, opts).value

    def visual_affinity(self, descriptors: np.ndarray) -> np.ndarray:
        unit = l2_normalize_rows(self.project(np.asarray(descriptors, dtype=self.params["W"].dtype)))
        return np.clip(unit @ unit[: self.cfg.L + 1].T, -1.0, 1.0)

    def rerank_scores(self, side: np.ndarray, descriptors: np.ndarray | None = None,
                      visual: np.ndarray | None = None) -> np.ndarray:
        refined = self.forward(side, descriptors=descriptors, visual=visual)
        return refined[1:] @ refined[0]

    # -- persistence -------------------------------------------------------
    def header(self) -> dict:
        cfg = asdict(self.cfg)
        cfg["blocks"] = list(self.cfg.blocks)
        cfg["query_side"] = list(self.cfg.query_side)
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": cfg,
            "parameters": [[n, list(s)] for n, s in param_shapes(self.cfg)],
            "dtype": "<f4",
            "parameter_count": count_parameters(self.cfg),
            "meta": self.meta,
        }


def identity_model(dim: int, K: int, width: int = 8, heads: int = 1, dtype=np.float64) -> GCSAModel:
    """Visual-only model with ``L = 0`` whose scores are monotone in the initial cosine.

    ``W`` is the identity and the attention/MLP weights are zero. ``W_in``
    copies the single affinity entry ``a`` into channel 0 and the attention
    output bias puts a constant 1 in channel 1, so refined rows are
    ``normalize([a, 1])`` and the query scores candidates by
    ``(a + 1) / sqrt(2 (a^2 + 1))``, increasing on [-1, 1].
    """
    if width < 2:
        raise ConfigError("identity_model needs width >= 2")
    cfg = ModelConfig(dim=dim, proj_dim=dim, width=width, heads=heads, affinity_dim=1, K=K, L=0)
    params = {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg)}
    params["W"] = np.eye(dim, dtype=dtype)
    params["W_in"][0, 0] = 1.0
    params["layer0.bo"][1] = 1.0
    for name in params:
        if name.endswith(("ln1_g", "ln2_g")):
            params[name][:] = 1.0
    return GCSAModel(cfg, params)


def rerank_order(scores: np.ndarray) -> np.ndarray:
    """Candidate indices by descending score; ties keep the initial order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def save_params(model: GCSAModel, path: str | Path) -> None:
    """Write the checkpoint: magic, header length, JSON header, float32 blob."""
    head = json.dumps(model.header(), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for name, _ in param_shapes(model.cfg):
        buf.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path, expect: dict | None = None) -> GCSAModel:
    """Read a checkpoint written by :func:`save_params`.

    ``expect`` maps config field names to required values (for example
    ``{"affinity_dim": 97}``); any mismatch raises
    :class:`CheckpointFormatError`.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointFormatError(f"{path}: not a GCSA checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        head = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    if head.get("format") != FORMAT_NAME or head.get("version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported format {head.get('format')!r} version {head.get('version')!r}"
        )
    c = head["config"]
    c["blocks"] = tuple(c["blocks"])
    c["query_side"] = tuple(c["query_side"])
    cfg = ModelConfig(**c)
    for key, want in (expect or {}).items():
        got = c.get(key)
        if isinstance(want, (list, tuple)):
            want = tuple(want)
        if got != want:
            raise CheckpointFormatError(f"{path}: checkpoint {key}={got!r}, expected {want!r}")
    shapes = param_shapes(cfg)
    if [[n, list(s)] for n, s in shapes] != head["parameters"]:
        raise CheckpointFormatError(f"{path}: parameter table does not match its configuration")
    blob = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    total = sum(int(np.prod(s)) for _, s in shapes)
    if blob.size != total:
        raise CheckpointFormatError(f"{path}: expected {total} weights, found {blob.size}")
    params, off = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        params[name] = blob[off:off + size].reshape(shape).astype(np.float32)
        off += size
    return GCSAModel(cfg, params, meta=head.get("meta", {}))
