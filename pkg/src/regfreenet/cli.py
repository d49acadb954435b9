"""Command-line entry point: ``regfreenet <command> [options]``.

Exit codes: 0 success, 2 usage error (no command, bad or missing flags),
3 unknown command, 4 missing/unreadable file, 5 invalid data or geometry,
6 bad configuration.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import sys
from pathlib import Path


from .core import (
    ConfigError,
    FormatError,
    RegFreeError,
    VoxelVolume,
    load_landmarks,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)

EXIT_OK, EXIT_USAGE, EXIT_UNKNOWN, EXIT_FILE, EXIT_DATA, EXIT_CONFIG = 0, 2, 3, 4, 5, 6

COMMANDS = ("synth", "make-labels", "mask", "slope", "train", "infer", "eval", "report")

log = logging.getLogger("regfreenet")


# --- config files -----------------------------------------------------------------

def _value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return text.strip()


def read_config(path):
    """Parse a key = value config with [network], [ndp], [train] and [masking] sections."""
    from .labelgen import MaskingConfig
    from .ndp import NDPConfig
    from .network import NetworkConfig
    from .trainer import TrainConfig

    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    sections = {s: {k: _value(v) for k, v in parser[s].items()} for s in parser.sections()}
    unknown = set(sections) - {"network", "ndp", "train", "masking"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    try:
        net = NetworkConfig(**sections.get("network", {}), ndp=NDPConfig(**sections.get("ndp", {})))
        masking = MaskingConfig(**sections.get("masking", {}))
        train = TrainConfig(**sections.get("train", {}), masking=masking)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return net, train


# --- commands -------------------------------------------------------------------------

def cmd_synth(args):
    from .synthdata import write_dataset

    manifest = write_dataset(args.out, n=args.n, shape=(args.shape,) * 3, seed=args.seed,
                             radius=args.radius, test_fraction=args.test_fraction)
    print(manifest)


def cmd_make_labels(args):
    from .labelgen import rasterize_all

    if args.like:
        like = load_volume(args.like)
        shape, spacing = like.shape, like.spacing
    else:
        shape, spacing = tuple(args.shape), (1.0, 1.0, 1.0)
    mask = rasterize_all(load_landmarks(args.landmarks), shape, args.radius)
    save_mask(mask, args.out, spacing)
    print(f"{mask.count()} voxels -> {args.out}")


def cmd_mask(args):
    from .labelgen import MaskingConfig, mask_implant

    vol = load_volume(args.volume)
    out = mask_implant(vol, load_mask(args.label), MaskingConfig(fill_value=args.fill))
    save_volume(out, args.out)


def cmd_slope(args):
    from .slope import slopes_from_label

    k = slopes_from_label(load_mask(args.label), args.spacing)
    print(f"k1 {k.k1:.6f}\nk2 {k.k2:.6f}")


def cmd_train(args):
    import dataclasses

    from .trainer import evaluate, load_manifest, save_checkpoint, train

    net_cfg, train_cfg = read_config(args.config)
    if args.ce_normalize is not None:
        train_cfg = dataclasses.replace(train_cfg, ce_normalize=args.ce_normalize)
    samples = load_manifest(args.data, radius=train_cfg.masking.radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(samples, train_cfg, net_cfg, out, resume=args.resume, max_steps=args.max_steps)
    save_checkpoint(out / "model.pt", result.model, None, result.step, net_cfg, None, result.history)
    splits = {}
    for split in ("train", "test"):
        subset = [s for s in samples if s.split == split]
        if subset:
            rep = evaluate(result.model, subset, train_cfg.masking, overlap=args.overlap)
            splits[split] = {k: v for k, v in rep.items() if k != "scans"}
    summary = {
        "method": args.name or out.name,
        "use_ndp": net_cfg.use_ndp,
        "use_spb": net_cfg.use_spb,
        "steps": result.step,
        "final_loss": result.history[-1]["loss"] if result.history else None,
        "splits": splits,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary["splits"], indent=2))


def cmd_infer(args):
    from .inference import predict_volume
    from .trainer import load_model

    model = load_model(args.checkpoint)
    vol = load_volume(args.volume)
    prob, k = predict_volume(vol, model, args.window, args.overlap, args.blend)
    save_volume(VoxelVolume(prob, vol.spacing), args.out)
    if k is not None:
        print(f"k1 {k.k1:.6f}\nk2 {k.k2:.6f}")


def cmd_eval(args):
    from .metrics import evaluate_dirs

    rep = evaluate_dirs(args.pred_dir, args.gt_dir, args.threshold)
    doc = {
        "method": args.name,
        "use_ndp": args.ndp,
        "use_spb": args.spb,
        "splits": {args.split: {"dice": rep["dice"], "iou": rep["iou"], "n_scans": rep["n_scans"]}},
        "scans": rep["scans"],
    }
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    for s in rep["scans"]:
        print(f"{s['scan']}\tDice {s['dice']:.4f}\tIoU {s['iou']:.4f}")
    print(f"mean\tDice {rep['dice']:.4f}\tIoU {rep['iou']:.4f}")


def _flag(v) -> str:
    return "-" if v is None else ("yes" if v else "no")


def build_report(docs: list[dict]) -> tuple[str, dict]:
    """Render run summaries as a Method | NDP | SPB | Dice | IoU table per split."""
    splits = []
    for d in docs:
        for s in d.get("splits", {}):
            if s not in splits:
                splits.append(s)
    header = ["Method", "NDP", "SPB"] + [f"{s} {m}" for s in splits for m in ("Dice", "IoU")]
    rows = []
    for d in docs:
        row = [str(d.get("method") or "?"), _flag(d.get("use_ndp")), _flag(d.get("use_spb"))]
        for s in splits:
            vals = d.get("splits", {}).get(s)
            row += [f"{vals['dice']:.4f}", f"{vals['iou']:.4f}"] if vals else ["-", "-"]
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))
    text = "\n".join([fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]) + "\n"
    table = {
        "columns": header,
        "rows": [
            {
                "method": d.get("method"),
                "use_ndp": d.get("use_ndp"),
                "use_spb": d.get("use_spb"),
                "splits": {s: {k: round(v, 4) for k, v in d.get("splits", {}).get(s, {}).items()
                               if k in ("dice", "iou")} for s in splits},
            }
            for d in docs
        ],
    }
    return text, table


def cmd_report(args):
    docs = []
    for p in args.inputs:
        p = Path(p)
        if p.is_dir():
            p = p / "summary.json"
        try:
            docs.append(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{p}: {exc}") from exc
    text, table = build_report(docs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".txt").write_text(text)
    out.with_suffix(".json").write_text(json.dumps(table, indent=2) + "\n")
    print(text, end="")


# --- parser -----------------------------------------------------------------------------

def _bool(text: str) -> bool:
    v = _value(text)
    if not isinstance(v, bool):
        raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regfreenet", description="Registration-free implant position prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("synth", help="write synthetic jaw phantoms and a manifest")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--shape", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--radius", type=float, default=4)
    s.add_argument("--test-fraction", type=float, default=0.25)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("make-labels", help="rasterize landmark files into cylindrical labels")
    s.add_argument("--landmarks", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--shape", type=int, nargs=3, metavar=("D", "H", "W"))
    g.add_argument("--like", help="take shape and spacing from this volume")
    s.add_argument("--radius", type=float, default=14)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_labels)

    s = sub.add_parser("mask", help="occlude the labelled implant region")
    s.add_argument("--volume", required=True)
    s.add_argument("--label", required=True)
    s.add_argument("--fill", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("slope", help="print the ground-truth slopes of a label")
    s.add_argument("--label", required=True)
    s.add_argument("--spacing", type=float, nargs=3, default=None, metavar=("SZ", "SY", "SX"))
    s.set_defaults(func=cmd_slope)

    s = sub.add_parser("train", help="train a network from a manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="manifest: volume landmarks split patient_id")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default=None, help="method name used in reports")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--overlap", type=float, default=0.25)
    s.add_argument("--ce-normalize", type=_bool, default=None, metavar="BOOL")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="sliding-window inference on one volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--window", type=int, default=128)
    s.add_argument("--overlap", type=float, default=0.25)
    s.add_argument("--blend", choices=("uniform", "gaussian"), default="uniform")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="Dice/IoU of predictions against labels")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--report", required=True)
    s.add_argument("--name", default=None)
    s.add_argument("--split", default="test")
    s.add_argument("--ndp", type=_bool, default=None, metavar="BOOL")
    s.add_argument("--spb", type=_bool, default=None, metavar="BOOL")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="tabulate eval reports or training summaries")
    s.add_argument("inputs", nargs="+", help="report JSON files or training output directories")
    s.add_argument("--out", required=True, help="output prefix; writes .txt and .json")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    command = next((a for a in argv if not a.startswith("-")), None)
    if command is not None and command not in COMMANDS:
        print(f"regfreenet: unknown command {command!r} (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return EXIT_UNKNOWN
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, FormatError) as exc:
        print(f"regfreenet {args.command}: file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except ConfigError as exc:
        print(f"regfreenet {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RegFreeError, ValueError) as exc:
        print(f"regfreenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
