"""``fas`` command-line entry point.

Subcommands: synth, train, eval, gradcheck, sweep, inspect. Exit codes:
0 ok, 2 config, 3 data, 4 numeric, 5 incompatible, 6 gradcheck failure,
7 every sweep cell failed.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from . import model as M
from . import train as T
from .errors import ConfigError, DataError, FasError, FeatureFileError
from .metrics import confusion_csv

log = logging.getLogger("fas")

SECTIONS = ("model", "train", "synth", "sweep", "gradcheck")
SWEEP_KEYS = {"grid", "split"}
GRADCHECK_KEYS = {"eps", "seed", "variants", "max_entries"}


class Run:
    """Resolved configuration for one invocation."""

    def __init__(self, args: argparse.Namespace, gradcheck: bool = False):
        self.args = args
        doc = {}
        if getattr(args, "config", None):
            try:
                doc = json.loads(Path(args.config).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        doc = {s: dict(doc.get(s) or {}) for s in SECTIONS}
        for item in getattr(args, "set", None) or []:
            key, sep, raw = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot or section not in SECTIONS:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            try:
                doc[section][name] = json.loads(raw)
            except json.JSONDecodeError:
                doc[section][name] = raw
        flags = {
            ("train", "seed"): getattr(args, "seed", None),
            ("synth", "seed"): getattr(args, "seed", None),
            ("model", "variant"): getattr(args, "variant", None),
            ("train", "epochs"): getattr(args, "epochs", None),
            ("train", "batch_size"): getattr(args, "batch_size", None),
            ("train", "lr"): getattr(args, "lr", None),
        }
        for (section, key), value in flags.items():
            if value is not None:
                doc[section][key] = value
        model_base = dict(T.TINY_CONFIG) if gradcheck else {}
        self.model = M.FasConfig.from_dict({**model_base, **doc["model"]})
        self.train = T.TrainConfig.from_dict(doc["train"])
        synth = doc["synth"]
        self.synth = D.SynthSpec.from_dict(synth)
        bad = sorted(set(doc["sweep"]) - SWEEP_KEYS)
        if bad:
            raise ConfigError(f"unknown sweep config keys: {', '.join(bad)}")
        self.sweep = {"grid": {}, "split": "test", **doc["sweep"]}
        bad = sorted(set(doc["gradcheck"]) - GRADCHECK_KEYS)
        if bad:
            raise ConfigError(f"unknown gradcheck config keys: {', '.join(bad)}")
        self.gradcheck = {"eps": 1e-5, "seed": 0, "variants": list(M.VARIANTS), "max_entries": None,
                          **doc["gradcheck"]}

    def effective(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "sweep": self.sweep,
            "gradcheck": self.gradcheck,
        }

    def echo(self, out_dir: Path | None = None) -> None:
        text = json.dumps(self.effective(), indent=2, sort_keys=True) + "\n"
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "effective_config.json").write_text(text)
        if not self.args.quiet:
            print("effective config:")
            print(text, end="")


def say(args, *parts) -> None:
    if not args.quiet:
        print(*parts)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    run = Run(args)
    out = Path(args.out or "synthetic")
    run.echo(out)
    manifest = D.generate_synthetic(run.synth, out)
    counts = Counter((s.split, s.label) for s in manifest.samples)
    for split in D.SPLITS:
        per_class = " ".join(f"{name}={counts[(split, i)]}" for i, name in enumerate(manifest.labels))
        print(f"{split}: {sum(counts[(split, i)] for i in range(len(manifest.labels)))} samples ({per_class})")
    say(args, f"manifest: {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    run = Run(args)
    if args.print_params:
        print(M.param_count(run.model))
        return 0
    if not args.manifest:
        raise DataError("train needs --manifest")
    out = Path(args.out or "checkpoint.fasc")
    out_dir = out.parent
    run.echo(out_dir)
    manifest = D.load_manifest(args.manifest, run.model.n_classes)
    resume = ckpt_io.load_checkpoint(args.resume) if args.resume else None

    def report(row):
        say(args, " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    ckpt = T.train(run.train, run.model, manifest, checkpoint=resume, until_epoch=args.until_epoch, on_epoch=report)
    ckpt_io.save_checkpoint(ckpt, out)
    T.write_history(ckpt.history, out_dir)
    say(args, f"checkpoint: {out}  params={M.param_count(run.model)}")
    return 0


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    manifest = D.load_manifest(args.manifest, ckpt.fas_config.n_classes)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    metrics = T.evaluate(ckpt, manifest, args.split, dtype=dtype)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    doc = {"split": args.split, "variant": ckpt.fas_config.variant, **metrics.to_dict(manifest.labels)}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    (out / "confusion.csv").write_text(confusion_csv(metrics.confusion, manifest.labels))
    print(f"acc={metrics.accuracy:.6f} f1={metrics.macro_f1:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    run = Run(args, gradcheck=True)
    if run.model.d > 8:
        raise ConfigError(f"gradcheck needs a tiny config (model.d <= 8), got d={run.model.d}")
    run.echo()
    gc = run.gradcheck
    failed = []
    for variant in gc["variants"]:
        cfg = run.model.replace(variant=variant)
        res = T.gradient_check(cfg, eps=gc["eps"], seed=gc["seed"], max_entries=gc["max_entries"])
        status = "ok" if res.ok else "FAIL"
        print(f"variant={variant} max_rel_err={res.max_rel_error:.3e} worst={res.worst_param}{list(res.worst_index)} "
              f"checked={res.checked} {status}")
        if not res.ok:
            failed.append(res)
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        print(f"gradient check failed; worst parameter {worst.worst_param} in variant {worst.variant} "
              f"(rel err {worst.max_rel_error:.3e})", file=sys.stderr)
        return 6
    return 0


def cmd_sweep(args) -> int:
    run = Run(args)
    if not args.manifest:
        raise DataError("sweep needs --manifest")
    out = Path(args.out or "sweep")
    run.echo(out)
    manifest = D.load_manifest(args.manifest, run.model.n_classes)
    rows = T.sweep(run.sweep["grid"], run.train, run.model, manifest, run.sweep["split"])
    T.write_sweep(rows, out)
    for row in rows:
        if row["status"] == "ok":
            say(args, f"{row['cell'] or '<default>'}: acc={row['accuracy']:.4f} f1={row['macro_f1']:.4f} "
                      f"params={row['param_count']}")
        else:
            say(args, f"{row['cell'] or '<default>'}: FAILED {row['error']}")
    return 0 if any(r["status"] == "ok" for r in rows) else 7


def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        with path.open("rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if head == D.MAGIC:
        h = D.read_feature_header(path)
        print(f"stream={h.stream} frames={h.frames} dim={h.dim} version={h.version}")
    elif head == ckpt_io.MAGIC:
        ckpt = ckpt_io.load_checkpoint(path)
        cfg = ckpt.fas_config
        print(f"variant={cfg.variant} d={cfg.d} epoch={ckpt.epoch} params={M.param_count(cfg)} "
              f"step={ckpt.optimizer.step}")
        for name, arr in ckpt.params.items():
            say(args, f"  {name} {list(arr.shape)}")
    elif head.lstrip()[:1] == b"{":
        manifest = D.load_manifest(path)
        splits = Counter(s.split for s in manifest.samples)
        print(f"manifest={manifest.name} samples={len(manifest.samples)} "
              + " ".join(f"{k}={splits[k]}" for k in D.SPLITS))
    else:
        raise ConfigError(f"{path}: unrecognized format; expected magic 'FASF' or 'FASC' or a JSON manifest")
    return 0


# ------------------------------------------------------------------ parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE",
                   help="override one config field (value parsed as JSON)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fas", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic conflict dataset")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest")
    p.add_argument("--variant", choices=M.VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch (resumable)")
    p.add_argument("--print-params", action="store_true", help="print the parameter count and exit")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--dtype", default="float64", choices=("float64", "float32"))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--variant", choices=M.VARIANTS)

    p = sub.add_parser("sweep", parents=[common], help="train+evaluate over a grid")
    p.add_argument("--manifest")

    p = sub.add_parser("inspect", parents=[common], help="describe a .fasf, manifest or checkpoint")
    p.add_argument("path")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def _thread_limit():
    value = os.environ.get("FAS_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("out", None), ("quiet", False), ("set", [])):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.command == "gradcheck" and getattr(args, "variant", None):
        args.set = [*args.set, f'gradcheck.variants=["{args.variant}"]']
        args.variant = None
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except FeatureFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if args.command == "inspect" else exc.exit_code
    except FasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
