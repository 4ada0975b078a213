"""Training loop, evaluation, gradient checking and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from . import rng as rngs
from .checkpoint import Checkpoint
from .data import Manifest, load_arrays
from .errors import ConfigError, DataError, IncompatibleError, NumericError
from .metrics import Metrics, compute_metrics
from .optim import AdamWState, adamw_step, lr_at

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2048
    lr: float = 2e-4
    warmup_ratio: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 42
    eval_every: int = 0
    checkpoint_path: str | None = None
    # parameters held at their initial value of zero (e.g. a semantic-only control)
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frozen", tuple(self.frozen))
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {v!r}")
        if not isinstance(self.lr, (int, float)) or self.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr!r}")
        if not isinstance(self.warmup_ratio, (int, float)) or not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"train.warmup_ratio must be in [0, 1), got {self.warmup_ratio!r}")
        if not isinstance(self.weight_decay, (int, float)) or self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"train.seed must be an integer, got {self.seed!r}")
        if isinstance(self.eval_every, bool) or not isinstance(self.eval_every, int) or self.eval_every < 0:
            raise ConfigError(f"train.eval_every must be a non-negative integer, got {self.eval_every!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class PreparedSplit:
    """Patchified streams of one split, ready for batching."""

    aco: list[np.ndarray]
    sem: list[np.ndarray]
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def batch(self, idx) -> M.Batch:
        return M.make_batch([self.aco[i] for i in idx], [self.sem[i] for i in idx], self.labels[idx])

    def __len__(self):
        return len(self.labels)


def prepare_split(manifest: Manifest, split: str, cfg: M.FasConfig) -> PreparedSplit:
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} of manifest {manifest.name!r} is empty")
    dims = manifest.dims
    if dims["acoustic"] != cfg.d_aco_in or dims["semantic"] != cfg.d_sem_in:
        raise IncompatibleError(
            f"manifest dims (acoustic={dims['acoustic']}, semantic={dims['semantic']}) do not match "
            f"model config (d_aco_in={cfg.d_aco_in}, d_sem_in={cfg.d_sem_in})"
        )
    aco, sem, labels = load_arrays(manifest, records)
    if np.any(labels >= cfg.n_classes):
        raise IncompatibleError(f"manifest labels exceed model n_classes={cfg.n_classes}")
    return PreparedSplit(
        [M.patchify(a, cfg.s) for a in aco], [M.patchify(x, cfg.s) for x in sem], labels,
        [r.id for r in records],
    )


def new_checkpoint(train_cfg: TrainConfig, fas_cfg: M.FasConfig) -> Checkpoint:
    shapes = M.param_shapes(fas_cfg)
    unknown = [n for n in train_cfg.frozen if n not in shapes]
    if unknown:
        raise ConfigError(f"train.frozen names unknown parameters: {unknown}")
    params = M.init_params(fas_cfg, rngs.stream(train_cfg.seed, "init"))
    for name in train_cfg.frozen:
        params[name][...] = 0.0
    opt = AdamWState.for_params(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    states = {k: rngs.get_state(rngs.stream(train_cfg.seed, k)) for k in ("dropout", "shuffle", "select")}
    return Checkpoint(fas_cfg, train_cfg.to_dict(), params, opt, 0, states, [])


def train(
    train_cfg: TrainConfig,
    fas_cfg: M.FasConfig,
    manifest: Manifest | None = None,
    checkpoint: Checkpoint | None = None,
    until_epoch: int | None = None,
    data: PreparedSplit | None = None,
    eval_data: PreparedSplit | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train ``fas_cfg`` on the manifest's train split.

    Passing a ``checkpoint`` resumes it; ``until_epoch`` stops early so that a
    run can be split into pieces that reproduce the unbroken run exactly.
    """
    if data is None:
        if manifest is None:
            raise ConfigError("train needs a manifest or prepared data")
        data = prepare_split(manifest, "train", fas_cfg)
    if eval_data is None and train_cfg.eval_every and manifest is not None and manifest.split("test"):
        eval_data = prepare_split(manifest, "test", fas_cfg)
    if len(data) == 0:
        raise DataError("train split is empty")

    if checkpoint is None:
        ckpt = new_checkpoint(train_cfg, fas_cfg)
    else:
        ckpt = checkpoint
        if ckpt.fas_config != fas_cfg:
            raise IncompatibleError("checkpoint model config differs from the requested config")
        if ckpt.train_config != train_cfg.to_dict():
            raise IncompatibleError("checkpoint train config differs from the requested config")

    n = len(data)
    bs = min(train_cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total_steps = train_cfg.epochs * per_epoch
    frozen = frozenset(train_cfg.frozen)
    shuffle = rngs.from_state(ckpt.rng_states["shuffle"])
    drop = rngs.from_state(ckpt.rng_states["dropout"])
    select = rngs.from_state(ckpt.rng_states["select"])
    stop = train_cfg.epochs if until_epoch is None else min(until_epoch, train_cfg.epochs)

    for epoch in range(ckpt.epoch, stop):
        order = shuffle.permutation(n)
        loss_sum = 0.0
        lr = 0.0
        for b in range(per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            step = ckpt.optimizer.step
            try:
                loss, res = M.loss_batch(data.batch(idx), ckpt.params, fas_cfg, True, drop, select)
                grads = res.tape.backward(loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, step {step + 1}: {exc}", exc.op) from exc
            lr = lr_at(step, total_steps, train_cfg.lr, train_cfg.warmup_ratio)
            adamw_step(ckpt.params, grads, ckpt.optimizer, lr, frozen)
            bad = [k for k, p in ckpt.params.items() if not np.all(np.isfinite(p))]
            if bad:
                raise NumericError(f"epoch {epoch + 1}, step {step + 1}: non-finite parameter {bad[0]}", "adamw_step")
            loss_sum += float(loss.value) * len(idx)
        row = {"epoch": epoch + 1, "loss": loss_sum / n, "lr": lr}
        if eval_data is not None and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            m, _ = evaluate_prepared(ckpt.params, fas_cfg, eval_data, train_cfg.seed)
            row.update({"eval_accuracy": m.accuracy, "eval_macro_f1": m.macro_f1})
        ckpt.history.append(row)
        ckpt.epoch = epoch + 1
        log.info("epoch %d loss %.6f lr %.3g", row["epoch"], row["loss"], lr)
        if on_epoch is not None:
            on_epoch(row)

    ckpt.rng_states = {
        "dropout": rngs.get_state(drop),
        "shuffle": rngs.get_state(shuffle),
        "select": rngs.get_state(select),
    }
    return ckpt


def evaluate_prepared(
    params, fas_cfg: M.FasConfig, data: PreparedSplit, seed: int = 42, batch_size: int = 128, dtype=np.float64
) -> tuple[Metrics, np.ndarray]:
    """Eval-mode predictions and metrics; ``fas_no_topk`` draws its random
    selection from a fresh eval stream so repeated calls agree."""
    select = rngs.stream(seed, "eval")
    preds = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        res = M.forward_batch(data.batch(idx), params, fas_cfg, False, None, select, dtype)
        preds.append(M.predict(res.logits.value))
    pred = np.concatenate(preds)
    return compute_metrics(data.labels, pred, fas_cfg.n_classes), pred


def evaluate(ckpt: Checkpoint, manifest: Manifest, split: str = "test", dtype=np.float64) -> Metrics:
    if len(manifest.labels) != ckpt.fas_config.n_classes:
        raise IncompatibleError(
            f"manifest has {len(manifest.labels)} labels, checkpoint expects {ckpt.fas_config.n_classes}"
        )
    data = prepare_split(manifest, split, ckpt.fas_config)
    seed = ckpt.train_config.get("seed", 42)
    return evaluate_prepared(ckpt.params, ckpt.fas_config, data, seed, dtype=dtype)[0]


# ------------------------------------------------------------ gradient check

TINY_CONFIG = dict(d=8, s=2, k_aco=3, k_sem=4, n_q=2, d_aco_in=6, d_sem_in=10, ffn_expansion=3, dropout=0.4)


@dataclass
class GradCheckResult:
    variant: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-4


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck_batch(cfg: M.FasConfig, seed: int = 0, n_samples: int = 2) -> M.Batch:
    """Random streams of uneven length so padding and ragged patches are exercised."""
    gen = rngs.stream(seed, "gradcheck")
    aco, sem = [], []
    for i in range(n_samples):
        aco.append(gen.standard_normal((cfg.s * (cfg.k_aco + 1) + i + 1, cfg.d_aco_in)))
        sem.append(gen.standard_normal((cfg.s * (cfg.k_sem - 1) - i, cfg.d_sem_in)))
    labels = gen.integers(cfg.n_classes, size=n_samples)
    return M.batch_from_sequences(aco, sem, labels, cfg.s)


def gradient_check(
    cfg: M.FasConfig,
    batch: M.Batch | None = None,
    eps: float = 1e-5,
    seed: int = 0,
    max_entries: int | None = None,
    params: dict[str, np.ndarray] | None = None,
) -> GradCheckResult:
    """Max relative error between tape gradients and central differences.

    Runs in training mode with dropout and random selection re-seeded for
    every evaluation, so the loss is a fixed smooth function of the
    parameters. With ``max_entries`` a seeded subset (at least 200 entries)
    is checked instead of every entry.
    """
    if max(cfg.d, cfg.d_aco_in, cfg.d_sem_in) > 64:
        raise ConfigError("gradient_check is meant for tiny configs")
    batch = batch if batch is not None else gradcheck_batch(cfg, seed)
    if params is None:
        gen = rngs.stream(seed, "init")
        params = M.init_params(cfg, gen)
        # move off the symmetric init (zero biases, tiny queries) to a generic point
        params = {k: v + 0.3 * gen.standard_normal(v.shape) for k, v in params.items()}

    def loss_of(p):
        loss, res = M.loss_batch(batch, p, cfg, True, rngs.stream(seed, "dropout"), rngs.stream(seed, "select"))
        return loss, res

    loss, res = loss_of(params)
    grads = res.tape.backward(loss)
    entries = [(name, idx) for name, v in params.items() for idx in np.ndindex(v.shape)]
    if max_entries is not None and len(entries) > max(max_entries, 200):
        pick = rngs.stream(seed, "gradcheck").choice(len(entries), size=max(max_entries, 200), replace=False)
        entries = [entries[i] for i in sorted(pick)]
    worst = (0.0, "", ())
    for name, idx in entries:
        p = params[name]
        orig = p[idx]
        p[idx] = orig + eps
        up = float(loss_of(params)[0].value)
        p[idx] = orig - eps
        down = float(loss_of(params)[0].value)
        p[idx] = orig
        err = relative_error(float(grads[name][idx]), (up - down) / (2 * eps))
        if err > worst[0]:
            worst = (err, name, idx)
    return GradCheckResult(cfg.variant, worst[0], worst[1], tuple(int(i) for i in worst[2]), len(entries))


# ---------------------------------------------------------------------- sweeps

GRID_KEYS = ("variant", "k_aco", "k_sem", "n_q")


def cell_key(cell: dict) -> str:
    return ",".join(f"{k}={cell[k]}" for k in GRID_KEYS if k in cell)


def cell_seed(base: int, key: str) -> int:
    """Base seed plus a stable hash of the cell key; the empty key maps to ``base``."""
    return base + zlib.crc32(key.encode()) % (2**31) if key else base


def expand_grid(grid: dict[str, list]) -> list[dict]:
    unknown = sorted(set(grid) - set(GRID_KEYS))
    if unknown:
        raise ConfigError(f"unknown sweep grid keys: {', '.join(unknown)} (allowed: {GRID_KEYS})")
    axes = [k for k in GRID_KEYS if k in grid]
    for k in axes:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"sweep grid {k!r} must be a non-empty list")
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[k] for k in axes))]


SWEEP_COLUMNS = ("cell", *GRID_KEYS, "seed", "status", "accuracy", "macro_f1", "param_count", "wall_time_s", "error")


def run_cell(train_cfg: TrainConfig, fas_cfg: M.FasConfig, train_data: PreparedSplit, eval_data: PreparedSplit):
    """Train + evaluate one configuration; returns (checkpoint, metrics)."""
    ckpt = train(train_cfg, fas_cfg, data=train_data)
    metrics, _ = evaluate_prepared(ckpt.params, fas_cfg, eval_data, train_cfg.seed)
    return ckpt, metrics


def sweep(
    grid: dict[str, list],
    train_cfg: TrainConfig,
    fas_cfg: M.FasConfig,
    manifest: Manifest,
    split: str = "test",
) -> list[dict]:
    """One train+evaluate per grid cell. Failed cells are recorded, not raised."""
    cells = expand_grid(grid)
    train_data = prepare_split(manifest, "train", fas_cfg)
    eval_data = prepare_split(manifest, split, fas_cfg)
    rows = []
    for cell in cells:
        key = cell_key(cell)
        seed = cell_seed(train_cfg.seed, key)
        row = {c: None for c in SWEEP_COLUMNS}
        row.update({"cell": key, "seed": seed, **{k: getattr(fas_cfg, k) for k in GRID_KEYS}})
        row.update(cell)
        t0 = time.perf_counter()
        try:
            cfg = fas_cfg.replace(**cell)
            row["param_count"] = M.param_count(cfg)
            _, metrics = run_cell(train_cfg.replace(seed=seed), cfg, train_data, eval_data)
            row.update(status="ok", accuracy=metrics.accuracy, macro_f1=metrics.macro_f1)
        except Exception as exc:  # noqa: BLE001 - a failed cell must not abort the sweep
            log.warning("sweep cell %s failed: %s", key, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        row["wall_time_s"] = round(time.perf_counter() - t0, 3)
        rows.append(row)
    return rows


# ---------------------------------------------------------------- writers


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in columns})
    return buf.getvalue()


def write_table(rows: list[dict], out_dir, stem: str, columns=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    (out / f"{stem}.csv").write_text(_csv(rows, columns))
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=2) + "\n")


def write_history(history: list[dict], out_dir) -> None:
    write_table(history, out_dir, "history")


def write_sweep(rows: list[dict], out_dir) -> None:
    write_table(rows, out_dir, "sweep", SWEEP_COLUMNS)

