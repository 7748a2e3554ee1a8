"""Command-line front end.

Exit status: 0 on success, 2 on configuration or usage errors (the message
names the offending field or path), 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from clab.errors import ClabError, ConfigError, UsageError

log = logging.getLogger("clab")

SEED_ENV = "CLAB_SEED"


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def resolve_seed(cli_seed: int | None, config_seed: int | None) -> int | None:
    """``--seed`` wins, then ``$CLAB_SEED``, then whatever the config says."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}", SEED_ENV) from None
        if value < 0:
            raise ConfigError(f"{SEED_ENV} must be non-negative", SEED_ENV)
        return value
    return config_seed


def _experiment(args):
    from clab.bench import ExperimentConfig

    raw = _load_json(args.config)
    if isinstance(raw, dict):
        seed = resolve_seed(args.seed, raw.get("seed"))
        if seed is not None:
            raw = {**raw, "seed": seed}
    return ExperimentConfig.from_dict(raw), Path(args.config).resolve().parent


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from clab.data import SyntheticSpec, export_folder, generate_synthetic

    spec_dict = {}
    if args.config:
        raw = _load_json(args.config)
        if not isinstance(raw, dict) or raw.get("version") != 1 or "synthetic" not in raw:
            raise ConfigError("gen-data config must be {\"version\": 1, \"synthetic\": {...}}",
                              "synthetic")
        spec_dict = dict(raw["synthetic"])
    for key in ("num_classes", "locations_per_class", "views", "image_size", "split"):
        value = getattr(args, key)
        if value is not None:
            spec_dict[key] = value
    seed = resolve_seed(args.seed, spec_dict.get("seed"))
    if seed is not None:
        spec_dict["seed"] = seed
    from clab.bench import _build
    spec = _build(SyntheticSpec, spec_dict, "synthetic")
    out = Path(args.out)
    ds = generate_synthetic(spec)
    export_folder(ds, out)
    (out / "spec.json").write_text(json.dumps({"version": 1, "synthetic": spec.to_dict()},
                                              indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from clab.bench import prepare_encoder, resolve_data

    cfg, base = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _, _, pre = resolve_data(cfg, base)
    prepare_encoder(cfg, args.variant, pre, out)
    meta = out / "checkpoints" / f"{args.variant}.json"
    print(f"checkpoint: {meta.with_suffix('.clab')}")
    return 0


def cmd_evaluate(args) -> int:
    from clab.bench import resolve_data, run_cell
    from clab.contrastive import load_encoder
    from clab.eval import extract_features

    cfg, base = _experiment(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.with_suffix(".json").is_file() or not ckpt.with_suffix(".clab").is_file():
        raise UsageError(f"checkpoint not found: {ckpt.with_suffix('.clab')}")
    if not 0 < args.fraction <= 1:
        raise ConfigError("--fraction must lie in (0, 1]", "fraction")
    meta = json.loads(ckpt.with_suffix(".json").read_text())
    variant = args.variant or (meta.get("config", {}).get("contrastive", {}).get("mode")
                               if meta.get("kind") == "pretrain" else
                               "supervised" if meta.get("kind") == "supervised" else "none")
    enc = load_encoder(ckpt)
    if enc.config.to_dict() != cfg.encoder.to_dict():
        raise ConfigError("checkpoint encoder differs from the config's encoder", "encoder")
    train, test, _ = resolve_data(cfg, base)
    rec = run_cell(cfg, variant, args.protocol, args.fraction, args.repeat, enc, train, test,
                   extract_features(enc, train).features, extract_features(enc, test).features,
                   str(ckpt.with_suffix(".clab")))
    out = Path(args.out)
    (out / "records").mkdir(parents=True, exist_ok=True)
    payload = {**rec.to_dict(), "config": cfg.to_dict()}
    (out / "records" / rec.filename()).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if rec.status != "ok":
        log.error("evaluation failed: %s", rec.error)
        return 1
    print(json.dumps(rec.metrics, sort_keys=True))
    return 0


def cmd_benchmark(args) -> int:
    from clab.bench import run_benchmark

    cfg, base = _experiment(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1", "jobs")
    report = run_benchmark(cfg, args.out, jobs=args.jobs, data_root=base,
                           retry_failed=args.retry_failed)
    failed = sum(1 for r in report["records"] if r["status"] != "ok")
    print(f"{len(report['records'])} runs, {failed} failed; report in {args.out}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    from clab.report import emit_report

    for path in emit_report(args.report, args.out):
        print(path)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clab", description="Contrastive pretraining and "
                                "label-efficiency benchmarks on multi-temporal imagery.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None,
                        help=f"master seed override (else ${SEED_ENV}, else the config)")

    g = sub.add_parser("gen-data", help="render a synthetic dataset to PNGs + metadata.csv")
    common(g, config_required=False)
    g.add_argument("--out", required=True, help="output folder")
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--locations-per-class", dest="locations_per_class", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--split", type=int)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="pretrain one encoder variant")
    common(g)
    g.add_argument("--variant", choices=["none", "supervised", "moco", "mocotp"], default="mocotp")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("evaluate", help="evaluate one checkpoint with one protocol")
    common(g)
    g.add_argument("--checkpoint", required=True, help="checkpoint path (.clab)")
    g.add_argument("--protocol", choices=["knn", "linear", "finetune"], required=True)
    g.add_argument("--fraction", type=float, default=1.0)
    g.add_argument("--repeat", type=int, default=0)
    g.add_argument("--variant", choices=["none", "supervised", "moco", "mocotp"],
                   help="selects the eval hyperparameters (default: from the checkpoint)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("benchmark", help="run (or resume) the full benchmark grid")
    common(g)
    g.add_argument("--out", required=True, help="report directory")
    g.add_argument("--jobs", type=int, default=1, help="parallel evaluation cells")
    g.add_argument("--retry-failed", action="store_true", help="rerun cells recorded as failed")
    g.set_defaults(func=cmd_benchmark)

    g = sub.add_parser("report", help="write CSV tables and SVG charts for a report")
    g.add_argument("--report", required=True, help="report directory (holds report.json)")
    g.add_argument("--out", default=None, help="output directory (default: the report directory)")
    g.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        print(f"clab: config error{where}: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"clab: {exc}", file=sys.stderr)
        return 2
    except (ClabError, ArithmeticError, OSError, ValueError) as exc:
        print(f"clab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
