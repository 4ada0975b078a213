"""The FAS fusion model, its two ablations, and the Concat/Gated baselines.

Pipeline for ``variant="fas"``::

    patchify -> project -> L2 saliency -> top-k per stream -> concat context C
             -> learnable-query cross-attention (+ residual feed-forward)
             -> flatten -> MLP head -> logits

All forward passes run batched: a batch is a stack of padded, patchified
streams plus validity masks. Padding positions are never selected and never
enter a mean pool.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import engine as E
from .errors import ConfigError, DataError, ShapeError

VARIANTS = ("fas", "concat", "gated", "fas_no_topk", "fas_no_qlearn")


@dataclass(frozen=True)
class FasConfig:
    d: int = 512
    s: int = 5
    k_aco: int = 8
    k_sem: int = 16
    n_q: int = 2
    dropout: float = 0.4
    d_sem_in: int = 1280
    d_aco_in: int = 64
    n_classes: int = 7
    ffn_expansion: int = 3
    variant: str = "fas"

    def __post_init__(self):
        for name in ("d", "s", "k_aco", "k_sem", "n_q", "d_sem_in", "d_aco_in", "n_classes", "ffn_expansion"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.dropout, (int, float)) or not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FasConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "FasConfig":
        return FasConfig.from_dict({**self.to_dict(), **changes})


# ---------------------------------------------------------------- parameters


def param_shapes(cfg: FasConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every parameter owned by ``cfg.variant``, in canonical order."""
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "aco.W": (cfg.d_aco_in, d),
        "aco.b": (d,),
        "sem.W": (cfg.d_sem_in, d),
        "sem.b": (d,),
    }
    if cfg.variant in ("fas", "fas_no_topk"):
        h = cfg.ffn_expansion * d
        shapes.update({
            "query": (cfg.n_q, d),
            # no key bias: softmax over keys is invariant to it, so it would never learn
            "key.W": (d, d),
            "value.W": (d, d),
            "value.b": (d,),
            "ffn1.W": (d, h),
            "ffn1.b": (h,),
            "ffn2.W": (h, d),
            "ffn2.b": (d,),
        })
    if cfg.variant == "gated":
        shapes.update({"gate.W": (2 * d, d), "gate.b": (d,)})
    head_in = {"concat": 2 * d, "gated": d}.get(cfg.variant, cfg.n_q * d)
    shapes.update({
        "head1.W": (head_in, d),
        "head1.b": (d,),
        "head2.W": (d, cfg.n_classes),
        "head2.b": (cfg.n_classes,),
    })
    return shapes


def param_count(cfg: FasConfig) -> int:
    return sum(math.prod(shape) for shape in param_shapes(cfg).values())


def init_params(cfg: FasConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(±1/sqrt(fan_in)) weights, zero biases, N(0, 0.02²) queries."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "query":
            params[name] = 0.02 * rng.standard_normal(shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ------------------------------------------------------- stream preprocessing


def patchify(F: np.ndarray, s: int) -> np.ndarray:
    """Mean-pool non-overlapping windows of ``s`` frames; a short tail window is
    averaged over the frames it actually has."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise DataError(f"patchify needs a non-empty T×D sequence, got shape {F.shape}")
    if s < 1:
        raise ConfigError(f"patch factor must be >= 1, got {s}")
    T, D = F.shape
    n = -(-T // s)
    padded = np.zeros((n * s, D))
    padded[:T] = F
    sums = padded.reshape(n, s, D).sum(axis=1)
    counts = np.full(n, float(s))
    counts[-1] = T - (n - 1) * s
    return sums / counts[:, None]


def project(F: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if F.shape[-1] != W.shape[0] or W.shape[1] != b.shape[-1]:
        raise ShapeError(f"project: shapes {F.shape} x {W.shape} + {b.shape} do not agree")
    return F @ W + b


def saliency_scores(f: np.ndarray) -> np.ndarray:
    """Per-token L2 norm."""
    return np.sqrt(np.sum(np.square(f), axis=-1))


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores (lower index wins ties), ascending."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:k])


def top_k_select(f: np.ndarray, scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``k`` most salient rows of ``f`` in temporal order.

    Sequences shorter than ``k`` are kept whole and padded with zero rows;
    padded slots carry index -1.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    idx = top_k_indices(scores, k)
    out = np.zeros((k, f.shape[1]), dtype=f.dtype)
    out[: len(idx)] = f[idx]
    indices = np.full(k, -1, dtype=np.intp)
    indices[: len(idx)] = idx
    return out, indices


def random_indices(n_valid: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of min(k, n_valid) distinct positions, ascending."""
    take = min(k, n_valid)
    return np.sort(rng.choice(n_valid, size=take, replace=False))


@dataclass
class Batch:
    """Patchified, zero-padded streams for a group of samples."""

    aco: np.ndarray        # (B, Ta, d_aco_in)
    aco_mask: np.ndarray   # (B, Ta) bool, True on real patches
    sem: np.ndarray        # (B, Ts, d_sem_in)
    sem_mask: np.ndarray
    labels: np.ndarray     # (B,)

    def __len__(self):
        return len(self.labels)


def _stack(patches: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(p.shape[0] for p in patches)
    dim = patches[0].shape[1]
    out = np.zeros((len(patches), width, dim))
    mask = np.zeros((len(patches), width), dtype=bool)
    for i, p in enumerate(patches):
        out[i, : p.shape[0]] = p
        mask[i, : p.shape[0]] = True
    return out, mask


def make_batch(aco_patches: list[np.ndarray], sem_patches: list[np.ndarray], labels) -> Batch:
    """Build a batch from already-patchified streams."""
    if not aco_patches:
        raise DataError("cannot build an empty batch")
    aco, aco_mask = _stack(aco_patches)
    sem, sem_mask = _stack(sem_patches)
    return Batch(aco, aco_mask, sem, sem_mask, np.asarray(labels, dtype=np.intp))


def batch_from_sequences(aco_seqs, sem_seqs, labels, s: int) -> Batch:
    return make_batch([patchify(a, s) for a in aco_seqs], [patchify(x, s) for x in sem_seqs], labels)


# ------------------------------------------------------------ forward pieces


def _select(f: E.Var, mask: np.ndarray, k: int, rng: np.random.Generator | None, randomized: bool):
    """Row selection per sample; returns (selected Var (B,k,d), index (B,k) with -1 on pads)."""
    scores = saliency_scores(f.value)
    B = scores.shape[0]
    index = np.full((B, k), -1, dtype=np.intp)
    for i in range(B):
        n_valid = int(mask[i].sum())
        if randomized:
            if rng is None:
                raise ConfigError("random token selection needs an rng")
            idx = random_indices(n_valid, k, rng)
        else:
            idx = top_k_indices(scores[i, :n_valid], k)
        index[i, : len(idx)] = idx
    valid = index >= 0
    return E.gather_rows(f, index, valid), index


def attend(P: dict[str, E.Var], C: E.Var, cfg: FasConfig, training: bool, rng) -> tuple[E.Var, E.Var]:
    """Scaled dot-product attention of the learnable queries over ``C``.

    Returns (attended values (.., n_q, d), attention weights (.., n_q, rows)).
    """
    K = E.linear(C, P["key.W"])
    V = E.linear(C, P["value.W"], P["value.b"])
    scores = E.scale(E.matmul(P["query"], E.transpose(K)), 1.0 / math.sqrt(cfg.d))
    A = E.softmax_rows(scores)
    return E.matmul(E.dropout(A, cfg.dropout, training, rng), V), A


def query_fuse(P: dict[str, E.Var], C: E.Var, cfg: FasConfig, training: bool, rng) -> tuple[E.Var, E.Var]:
    """Cross-attention followed by a residual GELU feed-forward (d -> e·d -> d)."""
    attn, A = attend(P, C, cfg, training, rng)
    hidden = E.gelu(E.linear(attn, P["ffn1.W"], P["ffn1.b"]))
    return E.add(attn, E.linear(hidden, P["ffn2.W"], P["ffn2.b"])), A


def classify(x: E.Var, P: dict[str, E.Var], cfg: FasConfig, training: bool, rng) -> E.Var:
    """Flatten trailing (rows, d) into one vector and run the two-layer head."""
    if x.value.ndim >= 3:
        x = E.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    if x.shape[-1] != P["head1.W"].shape[0]:
        raise ShapeError(f"classify: input width {x.shape[-1]} != head width {P['head1.W'].shape[0]}")
    h = E.dropout(E.gelu(E.linear(x, P["head1.W"], P["head1.b"])), cfg.dropout, training, rng)
    return E.linear(h, P["head2.W"], P["head2.b"])


@dataclass
class ForwardResult:
    logits: E.Var
    tape: E.Tape
    vars: dict[str, E.Var]
    aco_index: np.ndarray | None = None
    sem_index: np.ndarray | None = None
    attention: np.ndarray | None = None


def forward_batch(
    batch: Batch,
    params: dict[str, np.ndarray],
    cfg: FasConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    select_rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> ForwardResult:
    """Run one variant over a batch; logits have shape (B, n_classes).

    ``rng`` drives dropout, ``select_rng`` the random token choice of
    ``fas_no_topk`` (falls back to ``rng``).
    """
    if batch.aco.shape[-1] != cfg.d_aco_in or batch.sem.shape[-1] != cfg.d_sem_in:
        raise DataError(
            f"feature dims (aco={batch.aco.shape[-1]}, sem={batch.sem.shape[-1]}) do not match "
            f"config (aco={cfg.d_aco_in}, sem={cfg.d_sem_in})"
        )
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            got = None if name not in params else params[name].shape
            raise ShapeError(f"parameter {name}: expected {shape}, got {got}")

    tape = E.Tape(dtype)
    P = {name: tape.param(name, params[name]) for name in expected}
    f_aco = E.linear(tape.const(batch.aco), P["aco.W"], P["aco.b"])
    f_sem = E.linear(tape.const(batch.sem), P["sem.W"], P["sem.b"])
    result = ForwardResult(None, tape, P)

    if cfg.variant in ("concat", "gated"):
        p_aco = E.mean_rows(f_aco, batch.aco_mask)
        p_sem = E.mean_rows(f_sem, batch.sem_mask)
        pooled = E.concat([p_aco, p_sem], axis=-1)
        if cfg.variant == "concat":
            fused = pooled
        else:
            g = E.sigmoid(E.linear(pooled, P["gate.W"], P["gate.b"]))
            fused = E.add(E.mul(g, p_aco), E.mul(E.one_minus(g), p_sem))
        result.logits = classify(fused, P, cfg, training, rng)
        return result

    randomized = cfg.variant == "fas_no_topk"
    sel_rng = select_rng if select_rng is not None else rng
    sel_aco, result.aco_index = _select(f_aco, batch.aco_mask, cfg.k_aco, sel_rng, randomized)
    sel_sem, result.sem_index = _select(f_sem, batch.sem_mask, cfg.k_sem, sel_rng, randomized)
    C = E.concat([sel_aco, sel_sem], axis=-2)

    if cfg.variant == "fas_no_qlearn":
        pooled = E.mean_rows(C)
        tokens = E.broadcast_to(
            E.reshape(pooled, pooled.shape[:-1] + (1, cfg.d)), pooled.shape[:-1] + (cfg.n_q, cfg.d)
        )
    else:
        tokens, A = query_fuse(P, C, cfg, training, rng)
        result.attention = A.value
    result.logits = classify(tokens, P, cfg, training, rng)
    return result


def loss_batch(batch: Batch, params, cfg: FasConfig, training=True, rng=None, select_rng=None):
    """Mean cross-entropy over the batch; returns (loss Var, ForwardResult)."""
    res = forward_batch(batch, params, cfg, training, rng, select_rng)
    return E.cross_entropy(res.logits, batch.labels), res


def forward(aco: np.ndarray, sem: np.ndarray, params, cfg: FasConfig, training=False, rng=None) -> np.ndarray:
    """Logits (n_classes,) for a single utterance given raw frame sequences."""
    batch = batch_from_sequences([aco], [sem], [0], cfg.s)
    return forward_batch(batch, params, cfg, training, rng).logits.value[0]


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(logits, axis=-1)
