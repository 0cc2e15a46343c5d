"""Command-line entry point.

Subcommands: train, inject, extract, detect, attack, inspect. Exit codes:
0 success, 1 usage error (bad flags, missing files), 2 data/contract error.
XSGS_THREADS caps numeric worker threads and must be honored before numpy
loads, so module imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

# detection threshold for "a watermark is present": at least this fraction of
# points, and at least 2 points, must be flagged for a modality
MIN_DETECT_FRACTION = 0.001


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _apply_thread_cap() -> None:
    cap = os.environ.get("XSGS_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="xsgs", description="Multi-modal watermarking for Gaussian splat clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="canonical JSON config file")
    group.add_argument("--preset", help="named built-in preset (see --list-presets)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", default="xsgs_run", help="output directory (checkpoint, metrics, figures)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inject", help="embed payloads into a cloud file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--bits", help="48-bit payload as 12 hex digits")
    p.add_argument("--feature", help="feature tensor file (u16[4] dims header + float32 LE)")
    p.add_argument("--object", help="payload object as a splat PLY")
    p.add_argument("--out", help="output PLY path (must differ from --cloud)")
    p.add_argument("--in-place", action="store_true", help="allow overwriting the input cloud")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("extract", help="detect carriers and decode payloads")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("detect", help="report detected carrier masks only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attack", help="pruning robustness suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", help="cover cloud (default: synthetic clouds per trial)")
    p.add_argument("--rates", default="0.05..0.25", help="comma list or start..end (step 0.05)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--out-dir", default="xsgs_attack")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("inspect", help="print cloud header info and field statistics")
    p.add_argument("--cloud", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def parse_rates(text: str) -> list:
    if ".." in text:
        lo, hi = text.split("..")
        lo, hi = float(lo), float(hi)
        out = []
        r = lo
        while r <= hi + 1e-9:
            out.append(round(r, 6))
            r += 0.05
        return out
    return [float(x) for x in text.split(",") if x.strip()]


def _load_config(path: Path):
    from .errors import ConfigError
    from .train import TrainConfig

    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    paths = {}
    if isinstance(data, dict) and "out_dir" in data:
        paths["out_dir"] = data.pop("out_dir")
    return TrainConfig.from_dict(data), paths


def _load_model(path: Path):
    from .train import load_model

    model, opt_arrays = load_model(path.read_bytes())
    return model, opt_arrays


def cmd_train(args) -> int:
    from .report import write_training_outputs
    from .train import PRESETS, train

    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}")
        config, paths = PRESETS[args.preset], {}
    else:
        config, paths = _load_config(_require_file(args.config, "config file"))
    resume = _require_file(args.resume, "resume checkpoint").read_bytes() if args.resume else None
    out_dir = Path(paths.get("out_dir", args.out))
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(config, resume=resume, log_every=args.log_every)
    ckpt_path = out_dir / "checkpoint.xsgs"
    ckpt_path.write_bytes(result.checkpoint)
    write_training_outputs(result.metrics, out_dir)
    last = {k: v for k, v in result.metrics[-1].items() if k != "step"} if result.metrics else {}
    print(f"trained {config.steps} steps; checkpoint -> {ckpt_path}")
    if last:
        print("final: " + ", ".join(f"{k}={v:.5g}" for k, v in last.items()))
    return 0


def _read_payloads(args, model):
    import numpy as np

    from .gscloud import load_cloud
    from .payload import feature_from_bytes, hex_to_bits
    from .pipeline import build_patch_sets

    bits = feature = obj = None
    if args.bits:
        bits = hex_to_bits(args.bits)
    if args.feature:
        feature = feature_from_bytes(_require_file(args.feature, "feature file").read_bytes())
        feature = np.asarray(feature, dtype=np.float64)
    if args.object:
        obj = load_cloud(str(_require_file(args.object, "payload object")))
    return build_patch_sets(model, bits=bits, feature=feature, obj=obj)


def cmd_inject(args) -> int:
    from .attacks import sh_psnr
    from .gscloud import load_cloud, save_cloud, sort_canonical
    from .pipeline import inject_cloud

    cloud_path = _require_file(args.cloud, "cloud file")
    if args.in_place:
        out_path = Path(args.out) if args.out else cloud_path
    else:
        if not args.out:
            raise UsageError("--out is required (or pass --in-place)")
        out_path = Path(args.out)
        if out_path.resolve() == cloud_path.resolve():
            raise UsageError("output path equals the input cloud; pass --in-place to allow this")
    model, _ = _load_model(_require_file(args.ckpt, "checkpoint"))
    cloud = load_cloud(str(cloud_path))
    patch_sets = _read_payloads(args, model)
    watermarked, masks = inject_cloud(model, cloud, patch_sets)
    save_cloud(watermarked, str(out_path))
    ordered, _ = sort_canonical(cloud)
    sizes = ", ".join(f"{m}={k}" for m, k in masks.sizes().items())
    print(f"watermarked {watermarked.n} points -> {out_path}")
    print(f"carriers: {sizes}; slot PSNR {sh_psnr(ordered, watermarked, model.slot_spec):.2f} dB")
    return 0


def cmd_extract(args) -> int:
    from .gscloud import load_cloud, save_cloud
    from .payload import bits_to_hex, feature_to_bytes
    from .pipeline import extract_cloud
    from .report import write_json

    model, _ = _load_model(_require_file(args.ckpt, "checkpoint"))
    cloud = load_cloud(str(_require_file(args.cloud, "cloud file")))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = extract_cloud(model, cloud, tau=args.tau)
    detected = {
        m: bool(frac >= MIN_DETECT_FRACTION and frac * cloud.n >= 2)
        for m, frac in result.flagged_fraction.items()
    }
    report = {
        "flagged_fraction": result.flagged_fraction,
        "flagged_counts": {m: int(result.masks[m].sum()) for m in result.flagged_fraction},
        "watermark_detected": detected,
        "notes": result.notes,
    }
    if result.bits is not None:
        report["bits_hex"] = bits_to_hex(result.bits)
        report["bit_confidence_mean"] = float(result.bit_confidence.mean())
        (out_dir / "bits.txt").write_text(report["bits_hex"] + "\n")
    if result.feature is not None:
        (out_dir / "feature.bin").write_bytes(feature_to_bytes(result.feature))
    if result.obj is not None:
        save_cloud(result.obj, str(out_dir / "object.ply"))
        report["object_points"] = result.obj.n
        report["object_coordinates"] = "normalized-unit-cube"
    write_json(out_dir / "report.json", report)
    if any(detected.values()):
        found = ", ".join(m for m, d in detected.items() if d)
        print(f"watermark detected ({found}); outputs in {out_dir}")
    else:
        print("no watermark detected (flagged fractions below threshold)")
    for m, frac in result.flagged_fraction.items():
        print(f"  {m}: flagged {report['flagged_counts'][m]} points ({frac:.4%})")
    return 0


def cmd_detect(args) -> int:
    from .gscloud import load_cloud, sort_canonical

    model, _ = _load_model(_require_file(args.ckpt, "checkpoint"))
    cloud = load_cloud(str(_require_file(args.cloud, "cloud file")))
    ordered, _ = sort_canonical(cloud)
    masks, _ = model.detect.detect(ordered, tau=args.tau)
    print(f"{cloud.n} points")
    for m in model.config.modalities:
        count = int(masks[m].sum())
        print(f"  {m}: {count} flagged ({count / cloud.n:.4%})")
    return 0


def cmd_attack(args) -> int:
    from .attacks import run_robustness_suite
    from .gscloud import load_cloud
    from .report import ROBUSTNESS_COLUMNS, format_table, write_robustness_outputs

    model, _ = _load_model(_require_file(args.ckpt, "checkpoint"))
    rates = parse_rates(args.rates)
    if not rates:
        raise UsageError(f"no pruning rates parsed from {args.rates!r}")
    base_cloud = None
    if args.cloud:
        base_cloud = load_cloud(str(_require_file(args.cloud, "cloud file")))
    report = run_robustness_suite(model, rates=rates, trials=args.trials, seed=args.seed, base_cloud=base_cloud)
    out_dir = Path(args.out_dir)
    write_robustness_outputs(report, out_dir)
    headers = [h for h in ROBUSTNESS_COLUMNS if any(h in row for row in report.rows)]
    print(format_table(headers, report.rows), end="")
    print(f"report written to {out_dir}")
    return 0


def cmd_inspect(args) -> int:
    from .gscloud import load_cloud
    from .report import format_table

    cloud = load_cloud(str(_require_file(args.cloud, "cloud file")))
    print(f"{args.cloud}: binary little-endian splat PLY, {cloud.n} points, 62 float32 properties")
    groups = [
        ("x", cloud.raw[:, 0]),
        ("y", cloud.raw[:, 1]),
        ("z", cloud.raw[:, 2]),
        ("normals", cloud.normals),
        ("f_dc", cloud.sh_dc),
        ("f_rest", cloud.sh_rest),
        ("opacity", cloud.opacity),
        ("scale", cloud.scales),
        ("rot", cloud.rotations),
    ]
    rows = [
        {"field": name, "min": float(a.min()), "mean": float(a.mean()), "max": float(a.max())}
        for name, a in groups
    ]
    print(format_table(["field", "min", "mean", "max"], rows), end="")
    return 0


def main(argv=None) -> int:
    _apply_thread_cap()
    from .errors import XsgsError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except XsgsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
