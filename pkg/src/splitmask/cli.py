"""``splitmask`` command line.

Every command takes ``--config FILE`` and any number of ``--set key=value``
overrides, writes into ``--out DIR`` and leaves the resolved config plus a
version string there.  Failures print one JSON line on stderr and exit with
2 (config), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, save_config
from .data import IngestionError, export_image_folder, synth_generate
from .errors import CapacityError, ConfigError, NumericalError

log = logging.getLogger("splitmask")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OTHER = 2, 3, 4, 1


def version_string() -> str:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return f"splitmask {pkg}; python {platform.python_version()}; numpy {np.__version__}"


def _prepare(args, mode: str | None = None) -> tuple[RunConfig, Path]:
    overrides = list(args.set or [])
    if mode is not None:
        overrides.append(f"mode={mode}")
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    (out / "VERSION").write_text(version_string() + "\n", encoding="utf-8")
    return cfg, out


def cmd_synth(args) -> int:
    cfg, out = _prepare(args)
    d = cfg.data
    train, test = synth_generate(d.synth_seed, d.n_train, d.n_test, d.synth_classes, cfg.model.image_size)
    export_image_folder(train, out, d.train_manifest)
    export_image_folder(test, out, d.test_manifest)
    print(json.dumps({"train": len(train), "test": len(test), "path": str(out)}))
    return 0


def cmd_fit_tokenizer(args) -> int:
    from .tokenizer import save_vocabulary
    from .train import _build_vocab, load_datasets

    cfg, out = _prepare(args)
    train, _ = load_datasets(cfg)
    cfg.tokenizer.path = None
    vocab = _build_vocab(cfg, train)
    path = save_vocabulary(vocab, out / "vocab.pvoc")
    print(json.dumps({"vocabulary": str(path), "V": vocab.V, "d": vocab.d, "kind": vocab.kind}))
    return 0


def cmd_pretrain(args) -> int:
    from .plotting import loss_curve
    from .train import pretrain

    cfg, out = _prepare(args, "pretrain")
    res = pretrain(cfg, out)
    if res.metrics:
        loss_curve(out / "metrics.csv", out / "loss_curve.svg")
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "epochs": res.epochs, "steps": res.total_steps,
                      "final_loss_total": last.get("loss_total")}))
    return 0


def cmd_finetune(args) -> int:
    from .train import finetune, load_datasets

    if args.checkpoint:
        args.set = [*(args.set or []), f"finetune.checkpoint={args.checkpoint}"]
    cfg, out = _prepare(args, "finetune")
    train, test = load_datasets(cfg)
    res = finetune(cfg, train, test, out_dir=out)
    print(json.dumps({"top1_best": res.top1_best, "top1_final": res.top1_final,
                      "init": cfg.finetune.checkpoint or "random"}))
    return 0


def cmd_probe(args) -> int:
    from .plotting import probe_curve
    from .train import load_datasets, probe, write_eval_rows

    if args.checkpoint:
        args.set = [*(args.set or []), f"probe.checkpoint={args.checkpoint}"]
    cfg, out = _prepare(args, "probe")
    train, test = load_datasets(cfg)
    acc = probe(cfg, train, test)
    path = out / "probe.csv"
    path.unlink(missing_ok=True)
    write_eval_rows(path, cfg.tag, cfg.seed, {f"layer_{k}": v for k, v in sorted(acc.items())})
    probe_curve(path, out / "probe_curve.svg")
    print(json.dumps({f"layer_{k}": v for k, v in sorted(acc.items())}))
    return 0


def cmd_sweep(args) -> int:
    from .plotting import sweep_curve
    from .train import sweep

    cfg, out = _prepare(args, "sweep")
    if not cfg.sweep.grid:
        raise ConfigError("sweep.grid: empty grid")
    rows = sweep(cfg, out, workers=args.workers)
    failed = sum(r["status"] != "ok" for r in rows)
    if failed < len(rows):
        try:
            sweep_curve(out / "results.csv", out / "sweep_curve.svg")
        except ConfigError as e:
            log.warning("no sweep plot: %s", e)
    print(json.dumps({"cells": len(rows), "failed": failed, "results": str(out / "results.csv")}))
    return 0 if failed == 0 else EXIT_OTHER


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed, include_model=not args.ops_only)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:22s} max_rel_error={r.max_rel_error:.3e} tol={r.tol:.0e} {status}")
    return 0 if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_plot(args) -> int:
    from .plotting import plot

    out = Path(args.out)
    target = out if out.suffix == ".svg" else out / f"{args.kind}.svg"
    path = plot(args.csv, args.kind, target)
    print(json.dumps({"plot": str(path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitmask", description="Masked image modeling on small datasets.")
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, default_out):
        sp.add_argument("--config", "-c", help="YAML config file")
        sp.add_argument("--set", "-s", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        sp.add_argument("--out", "-o", default=default_out, help="run directory")

    common(sub.add_parser("synth", help="write the synthetic shapes dataset as an image folder"), "data/synth")
    common(sub.add_parser("fit-tokenizer", help="build a vocabulary file"), "runs/tokenizer")
    common(sub.add_parser("pretrain", help="pre-train an encoder"), "runs/pretrain")
    sp = sub.add_parser("finetune", help="finetune a checkpoint (or a random init) with a classifier head")
    common(sp, "runs/finetune")
    sp.add_argument("--checkpoint", help="pre-trained checkpoint; omit for random initialisation")
    sp = sub.add_parser("probe", help="linear probe on each encoder layer")
    common(sp, "runs/probe")
    sp.add_argument("--checkpoint")
    sp = sub.add_parser("sweep", help="run a grid of pre-training configs")
    common(sp, "runs/sweep")
    sp.add_argument("--workers", type=int, default=None, help="parallel cells (default: $SPLITMASK_WORKERS or 1)")
    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ops-only", action="store_true", help="skip the full-model step")
    sp = sub.add_parser("plot", help="render a CSV as SVG")
    sp.add_argument("csv")
    sp.add_argument("--kind", required=True, choices=["loss_curve", "sweep_curve", "probe_curve"])
    sp.add_argument("--out", "-o", default="plots")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "fit-tokenizer": cmd_fit_tokenizer,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
}


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "exit": code, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        return _fail("config", EXIT_CONFIG, e)
    except (IngestionError, CapacityError, FileNotFoundError) as e:
        return _fail("data", EXIT_DATA, e)
    except (NumericalError, FloatingPointError) as e:
        return _fail("numerical", EXIT_NUMERICAL, e)


if __name__ == "__main__":
    sys.exit(main())
