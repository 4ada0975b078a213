"""Feature containers, manifests, stratified splits and synthetic conflict data.

``.fasf`` layout (little endian)::

    magic   4s   b"FASF"
    version u16  1
    stream  u8   0 = acoustic, 1 = semantic
    frames  u32
    dim     u32
    payload frames * dim float32, row major
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng as rngs
from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    ManifestError,
    TruncatedError,
    VersionError,
    FeatureFileError,
)

log = logging.getLogger(__name__)

MAGIC = b"FASF"
VERSION = 1
HEADER = struct.Struct("<4sHBII")
STREAM_TAGS = {"acoustic": 0, "semantic": 1}
TAG_NAMES = {v: k for k, v in STREAM_TAGS.items()}
DEFAULT_LABELS = ("angry", "disgust", "fear", "happy", "neutral", "sad", "surprised")
DEFAULT_DIMS = {"acoustic": 64, "semantic": 1280}
SPLITS = ("train", "test")


@dataclass
class FeatureSequence:
    stream: str
    data: np.ndarray  # (frames, dim) float32

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureHeader:
    version: int
    stream: str
    frames: int
    dim: int


def encode_feature(seq: FeatureSequence) -> bytes:
    data = np.asarray(seq.data)
    if data.ndim != 2:
        raise DataError(f"feature data must be 2-D, got shape {data.shape}")
    if seq.stream not in STREAM_TAGS:
        raise DataError(f"unknown stream {seq.stream!r}")
    if not np.all(np.isfinite(data)):
        raise DataError("feature data contains non-finite values")
    header = HEADER.pack(MAGIC, VERSION, STREAM_TAGS[seq.stream], data.shape[0], data.shape[1])
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def write_feature_file(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_feature(seq))


def _parse_header(raw: bytes, total_size: int, source) -> FeatureHeader:
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{source}: header is {len(raw)} bytes, need {HEADER.size}", "header")
    magic, version, tag, frames, dim = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r} (FASF)", "magic")
    if version != VERSION:
        raise VersionError(f"{source}: unsupported version {version}, expected {VERSION}", "version")
    if tag not in TAG_NAMES:
        raise FeatureFileError(f"{source}: unknown stream tag {tag}", "stream")
    expected = HEADER.size + frames * dim * 4
    if total_size < expected:
        raise TruncatedError(
            f"{source}: payload truncated, file has {total_size} bytes, expected {expected}", "payload"
        )
    if total_size > expected:
        raise FeatureFileError(
            f"{source}: {total_size - expected} trailing bytes after payload", "payload"
        )
    return FeatureHeader(version, TAG_NAMES[tag], frames, dim)


def decode_feature(raw: bytes, source="<bytes>") -> FeatureSequence:
    h = _parse_header(raw, len(raw), source)
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size, count=h.frames * h.dim)
    return FeatureSequence(h.stream, data.reshape(h.frames, h.dim).astype(np.float32))


def read_feature_file(path) -> FeatureSequence:
    return decode_feature(Path(path).read_bytes(), source=path)


def read_feature_header(path) -> FeatureHeader:
    """Validate a ``.fasf`` file from its header and size without loading the payload."""
    path = Path(path)
    with path.open("rb") as fh:
        raw = fh.read(HEADER.size)
    return _parse_header(raw, path.stat().st_size, path)


# ------------------------------------------------------------------ manifests


@dataclass
class SampleRecord:
    id: str
    aco: str
    sem: str
    label: int
    split: str = "train"
    sem_label: int | None = None  # synthetic data only: class planted in the semantic stream

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["sem_label"] is None:
            del d["sem_label"]
        return d


@dataclass
class Manifest:
    name: str
    labels: list[str]
    samples: list[SampleRecord] = field(default_factory=list)
    root: Path = Path(".")
    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "labels": list(self.labels),
            "dims": dict(self.dims),
            "samples": [s.to_dict() for s in self.samples],
        }

    def split(self, tag: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == tag]

    def path(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: Manifest, path) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=False) + "\n"
    Path(path).write_text(text)


_RECORD_KEYS = {f.name for f in fields(SampleRecord)}
_REQUIRED_RECORD_KEYS = {"id", "aco", "sem", "label", "split"}


def load_manifest(path, n_classes: int = 7) -> Manifest:
    """Parse and fully validate a manifest, collecting every problem found."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError([f"manifest not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: invalid JSON: {exc}"]) from None
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ManifestError([f"{path}: top level must be an object"])
    for key in sorted(set(doc) - {"name", "labels", "samples", "dims"}):
        problems.append(f"unknown top-level key {key!r}")
    labels = doc.get("labels", list(DEFAULT_LABELS))
    if not isinstance(labels, list) or len(labels) != n_classes:
        problems.append(f"labels must list exactly {n_classes} names")
        labels = list(labels) if isinstance(labels, list) else []
    dims = dict(DEFAULT_DIMS)
    dims.update(doc.get("dims") or {})
    samples = []
    seen = set()
    for i, rec in enumerate(doc.get("samples", [])):
        where = f"samples[{i}]"
        if not isinstance(rec, dict):
            problems.append(f"{where}: not an object")
            continue
        missing = _REQUIRED_RECORD_KEYS - set(rec)
        extra = set(rec) - _RECORD_KEYS
        if missing:
            problems.append(f"{where}: missing keys {sorted(missing)}")
            continue
        if extra:
            problems.append(f"{where}: unknown keys {sorted(extra)}")
        where = f"sample {rec['id']!r}"
        if rec["id"] in seen:
            problems.append(f"{where}: duplicate id")
        seen.add(rec["id"])
        label = rec["label"]
        if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < n_classes:
            problems.append(f"{where}: label index {label!r} outside [0, {n_classes})")
        if rec["split"] not in SPLITS:
            problems.append(f"{where}: split {rec['split']!r} not in {SPLITS}")
        for key, stream in (("aco", "acoustic"), ("sem", "semantic")):
            fpath = path.parent / rec[key]
            try:
                h = read_feature_header(fpath)
            except FileNotFoundError:
                problems.append(f"{where}: missing {stream} file {rec[key]}")
                continue
            except FeatureFileError as exc:
                problems.append(f"{where}: {exc}")
                continue
            if h.stream != stream:
                problems.append(f"{where}: {rec[key]} is tagged {h.stream}, expected {stream}")
            if h.dim != dims[stream]:
                problems.append(f"{where}: {stream} dim mismatch, {rec[key]} has {h.dim}, expected {dims[stream]}")
            if h.frames == 0:
                problems.append(f"{where}: {stream} file {rec[key]} has no frames")
        samples.append(SampleRecord(**{k: rec[k] for k in _RECORD_KEYS if k in rec}))
    if problems:
        raise ManifestError(problems)
    return Manifest(str(doc.get("name", path.stem)), list(labels), samples, path.parent, dims)


def load_arrays(manifest: Manifest, records: list[SampleRecord]):
    """Read both streams of every record as float64 arrays."""
    aco, sem = [], []
    for rec in records:
        aco.append(read_feature_file(manifest.path(rec.aco)).data.astype(np.float64))
        sem.append(read_feature_file(manifest.path(rec.sem)).data.astype(np.float64))
    return aco, sem, np.array([r.label for r in records], dtype=np.intp)


def split_dataset(manifest: Manifest, train_fraction: float, seed: int) -> Manifest:
    """Stratified train/test assignment, deterministic under ``seed``."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    gen = rngs.stream(seed, "split")
    split = {}
    for label in range(len(manifest.labels)):
        ids = [s.id for s in manifest.samples if s.label == label]
        if not ids:
            continue
        if len(ids) < 2:
            log.warning("class %d has %d sample(s); cannot stratify, assigning to train", label, len(ids))
            split.update({i: "train" for i in ids})
            continue
        order = gen.permutation(len(ids))
        n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
        for rank, j in enumerate(order):
            split[ids[j]] = "train" if rank < n_train else "test"
    samples = [SampleRecord(**{**asdict(s), "split": split.get(s.id, s.split)}) for s in manifest.samples]
    return Manifest(manifest.name, list(manifest.labels), samples, manifest.root, dict(manifest.dims))


# ----------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic acoustic/semantic conflict generator.

    The ground-truth label is always the acoustic class. The acoustic class
    lives only in a short high-amplitude burst; the semantic class is spread
    over every semantic frame.
    """

    name: str = "synthetic-conflict"
    n_classes: int = 7
    samples_per_class: int = 70
    aco_frames: tuple[int, int] = (100, 200)
    sem_frames: tuple[int, int] = (10, 40)
    d_aco: int = 64
    d_sem: int = 1280
    snr: float = 1.0
    conflict_fraction: float = 0.5
    burst_length: int = 10
    burst_amplitude: float = 3.0
    train_fraction: float = 5 / 7
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "aco_frames", tuple(self.aco_frames))
        object.__setattr__(self, "sem_frames", tuple(self.sem_frames))
        problems = []
        for name in ("n_classes", "samples_per_class", "d_aco", "d_sem", "burst_length"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                problems.append(f"synth.{name} must be a positive integer, got {v!r}")
        for name in ("aco_frames", "sem_frames"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or not all(isinstance(x, int) for x in lo_hi) or not 1 <= lo_hi[0] <= lo_hi[1]:
                problems.append(f"synth.{name} must be [lo, hi] with 1 <= lo <= hi, got {list(lo_hi)}")
        if not isinstance(self.conflict_fraction, (int, float)) or not 0.0 <= self.conflict_fraction <= 1.0:
            problems.append(f"synth.conflict_fraction must be in [0, 1], got {self.conflict_fraction!r}")
        if not isinstance(self.train_fraction, (int, float)) or not 0.0 < self.train_fraction < 1.0:
            problems.append(f"synth.train_fraction must be in (0, 1), got {self.train_fraction!r}")
        for name in ("snr", "burst_amplitude"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0:
                problems.append(f"synth.{name} must be a non-negative number, got {v!r}")
        if not problems and self.burst_length > self.aco_frames[0]:
            problems.append("synth.burst_length exceeds the shortest acoustic stream")
        if not problems and self.conflict_fraction > 0 and self.n_classes < 2:
            problems.append("synth.conflict_fraction > 0 needs at least 2 classes")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aco_frames"] = list(self.aco_frames)
        d["sem_frames"] = list(self.sem_frames)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class SynthSample:
    id: str
    label: int
    sem_label: int
    aco: np.ndarray
    sem: np.ndarray
    burst: tuple[int, int]


def _directions(gen: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """``n`` random directions with unit RMS per component."""
    v = gen.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * np.sqrt(dim)


def synthesize(spec: SynthSpec) -> list[SynthSample]:
    """Generate samples in memory. Deterministic given ``spec``."""
    gen = rngs.stream(spec.seed, "synth")
    C = spec.n_classes
    aco_dirs = _directions(gen, C, spec.d_aco)
    sem_dirs = _directions(gen, C, spec.d_sem)
    n_conflict = int(round(spec.conflict_fraction * spec.samples_per_class))
    samples = []
    for a in range(C):
        conflict = np.zeros(spec.samples_per_class, dtype=bool)
        conflict[gen.permutation(spec.samples_per_class)[:n_conflict]] = True
        for j in range(spec.samples_per_class):
            s = a
            if conflict[j]:
                s = int(gen.integers(C - 1))
                s += s >= a
            T_a = int(gen.integers(spec.aco_frames[0], spec.aco_frames[1] + 1))
            T_s = int(gen.integers(spec.sem_frames[0], spec.sem_frames[1] + 1))
            aco = gen.standard_normal((T_a, spec.d_aco))
            start = int(gen.integers(T_a - spec.burst_length + 1))
            aco[start : start + spec.burst_length] += spec.burst_amplitude * aco_dirs[a]
            sem = gen.standard_normal((T_s, spec.d_sem)) + spec.snr * sem_dirs[s]
            samples.append(SynthSample(
                f"s{a}_{j:04d}", a, s, aco.astype(np.float32), sem.astype(np.float32),
                (start, start + spec.burst_length),
            ))
    return samples


def generate_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Write a synthetic dataset (features + ``manifest.json``) under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    labels = list(DEFAULT_LABELS) if spec.n_classes == len(DEFAULT_LABELS) else [
        f"class{i}" for i in range(spec.n_classes)
    ]
    records = []
    for smp in synthesize(spec):
        aco_rel = f"features/{smp.id}.aco.fasf"
        sem_rel = f"features/{smp.id}.sem.fasf"
        write_feature_file(out / aco_rel, FeatureSequence("acoustic", smp.aco))
        write_feature_file(out / sem_rel, FeatureSequence("semantic", smp.sem))
        records.append(SampleRecord(smp.id, aco_rel, sem_rel, smp.label, "train", smp.sem_label))
    manifest = Manifest(spec.name, labels, records, out, {"acoustic": spec.d_aco, "semantic": spec.d_sem})
    manifest = split_dataset(manifest, spec.train_fraction, spec.seed)
    save_manifest(manifest, out / "manifest.json")
    return manifest

