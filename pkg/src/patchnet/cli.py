"""Command-line surface: train / heatmap / eval / synth / converge / gradcheck / preprocess.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Settings for the
train and eval commands can come from a flat key=value config file; explicit
flags override file values and the fully resolved configuration is echoed
into the output directory so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, imaging, metrics, optim
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import grad_check, kaiming_init
from .patchcore import extract_heatmap, heatmap_to_image
from .tensor import Rng


class UsageError(Exception):
    pass


def read_config_file(path: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments ignored."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _resolve(args, file_cfg: dict[str, str], spec: list[tuple[str, type, object]]) -> dict:
    """Merge flag values over file values over defaults."""
    resolved = {}
    for key, typ, default in spec:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in file_cfg:
            raw = file_cfg[key]
            try:
                resolved[key] = _BOOL[raw.lower()] if typ is bool else typ(raw)
            except (KeyError, ValueError):
                raise UsageError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}") from None
        else:
            resolved[key] = default
    return resolved


def _echo_config(resolved: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(resolved):
            value = resolved[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            f.write(f"{key}={value}\n")


def _load_split(root: str, split: str, out_dir: str | None = None):
    index = imaging.scan_dataset(root, split)
    if out_dir:
        imaging.write_index(index, os.path.join(out_dir, f"{split}_index.txt"))
    return imaging.load_labeled_images(index)


_TRAIN_SPEC = [
    ("patch_size", int, 17),
    ("stride", int, 0),
    ("lr", float, 1e-4),
    ("batch_size", int, 4),
    ("patience", int, 1000),
    ("max_epochs", int, 100000),
    ("seed", int, 0),
    ("balance", bool, True),
    ("acc_stop", bool, True),
    ("coverage", str, "clamp_to_edge"),
    ("augment", str, ""),
    ("augment_mode", str, "stochastic"),
    ("deterministic", bool, False),
    ("threads", int, 1),
    ("verbose", bool, False),
]


def cmd_train(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = _resolve(args, file_cfg, _TRAIN_SPEC)
    if cfg["patch_size"] < 1:
        raise UsageError("--patch-size must be a positive integer")
    if cfg["stride"] < 0:
        raise UsageError("--stride must be positive (or 0 for patch-sized)")
    os.makedirs(args.out, exist_ok=True)
    train_set = _load_split(args.data, args.train_split, args.out)
    val_set = _load_split(args.data, args.val_split, args.out)

    channels = train_set[0][0].shape[2]
    augment = tuple(s for s in cfg["augment"].split(",") if s)
    train_cfg = optim.TrainConfig(
        patch_size=cfg["patch_size"],
        train_stride=cfg["stride"],
        lr=cfg["lr"],
        batch_size_images=cfg["batch_size"],
        patience_epochs=cfg["patience"],
        max_epochs=cfg["max_epochs"],
        seed=cfg["seed"],
        balance_classes=cfg["balance"],
        stop_on_train_acc=cfg["acc_stop"],
        coverage_mode=cfg["coverage"],
        augment=augment,
        augment_mode=cfg["augment_mode"],
        verbose=cfg["verbose"],
    )
    cfg["data"] = args.data
    cfg["out"] = args.out
    _echo_config(cfg, os.path.join(args.out, "config.txt"))

    params = kaiming_init(Rng(cfg["seed"]), (cfg["patch_size"], cfg["patch_size"], channels))
    best, report = optim.train(params, train_set, val_set, train_cfg)

    save_checkpoint(best, os.path.join(args.out, "best.ckpt"))
    save_checkpoint(params, os.path.join(args.out, "final.ckpt"))
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(f"stop_reason={report.stop_reason}\n")
        f.write(f"epochs_run={report.epochs_run}\n")
        f.write(f"best_epoch={report.best_epoch}\n")
        f.write(f"best_val_loss={report.best_val_loss:.6f}\n")
        for e in range(report.epochs_run):
            f.write(f"epoch={e + 1} train_loss={report.train_loss[e]:.6f} "
                    f"train_acc={report.train_acc[e]:.4f} val_loss={report.val_loss[e]:.6f} "
                    f"val_acc={report.val_acc[e]:.4f}\n")
    print(f"stopped: {report.stop_reason} after {report.epochs_run} epochs; "
          f"best val loss {report.best_val_loss:.6f} at epoch {report.best_epoch}")
    return 0


def cmd_heatmap(args) -> int:
    params = load_checkpoint(args.model)
    image = imaging.load_image(args.image)
    hm = extract_heatmap(params, image, source_image_id=os.path.basename(args.image),
                         threads=args.threads)
    imaging.save_image(heatmap_to_image(hm)[:, :, None], args.out)
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.model)
    index = imaging.scan_dataset(args.data, args.split)
    missing = [os.path.basename(p) for p, _, mask in index.entries if mask is None]
    if missing and not args.skip_missing_masks:
        raise RuntimeError("missing masks for: " + ", ".join(missing))
    items = []
    for path, _, mask_path in index.entries:
        if mask_path is None:
            continue
        items.append((os.path.basename(path), imaging.load_image(path),
                      imaging.load_image(mask_path)))
    report = metrics.dataset_report(params, items, threshold=args.threshold,
                                    threads=args.threads)
    text = metrics.format_report(report)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    _echo_config({"model": args.model, "data": args.data, "split": args.split,
                  "threshold": args.threshold, "out": args.out},
                 args.out + ".config.txt")
    sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    if args.square_h is None:
        args.square_h = args.square
    if args.square_w is None:
        args.square_w = args.square
    spec = analysis.SyntheticSpec(
        height=args.height, width=args.width,
        square_h=args.square_h, square_w=args.square_w,
        square_top=args.square_top, square_left=args.square_left,
        copies_per_class=args.copies, high_value=args.high,
    )
    ext = "." + args.format
    mask1 = analysis.class1_mask(spec)
    mask0 = np.zeros_like(mask1)
    for split in args.splits.split(","):
        split_dir = os.path.join(args.out, split)
        mask_dir = os.path.join(split_dir, "masks")
        os.makedirs(mask_dir, exist_ok=True)
        for label in (0, 1):
            os.makedirs(os.path.join(split_dir, str(label)), exist_ok=True)
        for k, (img, label) in enumerate(analysis.generate_synthetic(spec)):
            name = f"img{label}_{k:03d}"
            imaging.save_image(img, os.path.join(split_dir, str(label), name + ext))
            imaging.save_image(mask1 if label == 1 else mask0,
                               os.path.join(mask_dir, name + ext))
        index = imaging.scan_dataset(args.out, split)
        imaging.write_index(index, os.path.join(split_dir, "index.txt"))
    print(f"wrote {args.splits} splits under {args.out}")
    return 0


def cmd_converge(args) -> int:
    point = analysis.converged_probs(analysis.FeatureCounts(a=args.a, b=args.b))
    print(f"p0={point.p0:.6g} p1={point.p1:.1f}")
    return 0


def cmd_gradcheck(args) -> int:
    params = kaiming_init(Rng(args.seed), (args.patch_size, args.patch_size, args.channels))
    err = grad_check(params, Rng(args.seed + 1), args.probes, epsilon=args.epsilon)
    ok = err < args.threshold
    print(f"max_relative_error={err:.3e} threshold={args.threshold:g} "
          f"status={'pass' if ok else 'fail'}")
    return 0 if ok else 1


def cmd_preprocess(args) -> int:
    img = imaging.load_image(args.input)
    if not args.no_gamma:
        img = imaging.gamma_correct(img, gamma=args.gamma, encode=args.gamma_encode)
    if not args.no_color_constancy and img.shape[2] == 3:
        img = imaging.color_constancy(img, minkowski_p=args.minkowski_p)
    if args.resize:
        try:
            m, n = (int(v) for v in args.resize.lower().split("x"))
        except ValueError:
            raise UsageError(f"--resize expects HxW, got {args.resize!r}") from None
        img = imaging.resize(img, m, n)
    imaging.save_image(img, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchnet",
        description="Patch-averaging binary image classifier with probability heatmaps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset root (<root>/<split>/<class>/...)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and reports")
    p.add_argument("--train-split", default="train")
    p.add_argument("--val-split", default="val")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--balance", dest="balance", action="store_true", default=None)
    p.add_argument("--no-balance", dest="balance", action="store_false", default=None)
    p.add_argument("--no-acc-stop", dest="acc_stop", action="store_false", default=None,
                   help="disable the 100%%-training-accuracy stop rule")
    p.add_argument("--coverage", choices=["clamp_to_edge", "drop_remainder"])
    p.add_argument("--augment", help="comma list of rotate180,zoom,hflip,vflip")
    p.add_argument("--augment-mode", dest="augment_mode", choices=["stochastic", "expanded"])
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--threads", type=int)
    p.add_argument("--verbose", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("heatmap", help="write the per-pixel probability image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("eval", help="score heatmaps against feature masks")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--skip-missing-masks", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic rectangle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--square", type=int, help="rectangle size (square shorthand)")
    p.add_argument("--square-h", dest="square_h", type=int)
    p.add_argument("--square-w", dest="square_w", type=int)
    p.add_argument("--square-top", dest="square_top", type=int, default=0)
    p.add_argument("--square-left", dest="square_left", type=int, default=0)
    p.add_argument("--copies", type=int, default=1, help="images per class per split")
    p.add_argument("--high", type=int, default=255, help="pixel value inside the rectangle")
    p.add_argument("--splits", default="train,val")
    p.add_argument("--format", choices=["png", "pgm"], default="png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("converge", help="closed-form converged (p0, p1) for patch counts")
    p.add_argument("--a", type=int, required=True, help="shared-feature patch count")
    p.add_argument("--b", type=int, required=True, help="class-1-feature patch count")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=9)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("preprocess", help="gamma correction, color constancy, resize")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--gamma-encode", dest="gamma_encode", action="store_true",
                   help="use the darkening (encode) direction")
    p.add_argument("--no-gamma", action="store_true")
    p.add_argument("--no-color-constancy", dest="no_color_constancy", action="store_true")
    p.add_argument("--minkowski-p", dest="minkowski_p", type=float, default=6.0)
    p.add_argument("--resize", help="target dims as HxW")
    p.set_defaults(func=cmd_preprocess)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
