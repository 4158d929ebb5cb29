"""Command-line entry point.

Subcommands: gen-phantom, train, infer, eval, bench, gradcheck, params.
Errors print a single line ``error: <code>: <message>`` and exit nonzero.
A config file (--config) holds ``key = value`` lines ('#' comments); values
are parsed like CLI flags and serve as defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import bench, gradcheck, metrics, network, phantom, train, volio
from .errors import ConfigError, DataError, EmnetError
from .precision import set_precision


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parse_extents(text):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"bad extent list {text!r} (want X,Y,Z)") from None
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigError(f"bad extent list {text!r} (want X,Y,Z)")
    return parts


def parse_config_file(path):
    """``key = value`` lines -> dict; '#' starts a comment."""
    values = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_file(args, parser_defaults):
    if not getattr(args, "config", None):
        return args
    values = parse_config_file(args.config)
    for key, text in values.items():
        if key not in parser_defaults:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(args, key)
        if current != parser_defaults[key]:
            continue  # explicit flag wins
        default = parser_defaults[key]
        if isinstance(default, bool):
            setattr(args, key, text.lower() in ("1", "true", "yes", "on"))
        elif isinstance(default, int):
            setattr(args, key, int(text))
        elif isinstance(default, float):
            setattr(args, key, float(text))
        else:
            setattr(args, key, text)
    return args


def _add_common(sp):
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--precision", type=int, choices=(32, 64), default=64)


def build_parser():
    parser = _Parser(prog="emnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantom", help="write synthetic volumes")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--extents", default="32,32,32")
    g.add_argument("--noise", type=float, default=0.05)
    _add_common(g)

    t = sub.add_parser("train", help="train on a directory of volume pairs")
    t.add_argument("--data", required=True, help="directory from gen-phantom")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", default=None, help="key = value defaults file")
    t.add_argument("--preset", default="emnet", choices=sorted(network.PRESETS))
    t.add_argument("--val-count", type=int, default=0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    t.add_argument("--lr-decay", type=float, default=0.0,
                   help="per-step learning-rate decay (lr / (1 + decay * t))")
    t.add_argument("--target-dsc", type=float, default=None)
    t.add_argument("--log-every", type=int, default=1)
    _add_common(t)

    i = sub.add_parser("infer", help="segment a volume with a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="volume base path (no suffix)")
    i.add_argument("--out", required=True, help="output label base path")
    i.add_argument("--window", default=None, help="X,Y,Z tile size")
    i.add_argument("--overlap", type=float, default=0.5)
    i.add_argument("--fusion", default="uniform", choices=("uniform", "gaussian"))
    _add_common(i)

    e = sub.add_parser("eval", help="score predicted labels against reference")
    e.add_argument("--pred", required=True, help="predicted label base path")
    e.add_argument("--ref", required=True, help="reference label base path")
    e.add_argument("--classes", type=int, default=0, help="0 = infer from data")
    e.add_argument("--hd95", action="store_true")
    e.add_argument("--out", default=None, help="report CSV (case, class, dsc, hd)")
    _add_common(e)

    b = sub.add_parser("bench", help="time kernels on both backends")
    b.add_argument("--ops", default=None, help="comma list: scan,mamba,fft3,conv3d")
    b.add_argument("--out", default=None, help="CSV path")
    _add_common(b)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--samples", type=int, default=16)
    c.add_argument("--all", action="store_true",
                   help="run every case (the default when no --case is given)")
    c.add_argument("--case", action="append", default=None,
                   choices=sorted(gradcheck.CASES) + ["network"],
                   help="run one named case (repeatable)")
    _add_common(c)

    p = sub.add_parser("params", help="parameter/FLOP table per preset")
    p.add_argument("--scale", default="desk", choices=("desk", "full"))
    p.add_argument("--preset", action="append", default=None,
                   choices=sorted(network.PRESETS),
                   help="preset to tabulate (repeatable; default: all)")
    _add_common(p)

    parser.sub_map = {"gen-phantom": g, "train": t, "infer": i, "eval": e,
                      "bench": b, "gradcheck": c, "params": p}
    return parser


def _cmd_gen_phantom(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = phantom.PhantomSpec(extents=_parse_extents(args.extents),
                               classes=args.classes, noise=args.noise)
    pairs = phantom.gen_dataset(args.count, spec, seed=args.seed)
    for i, (image, labels) in enumerate(pairs):
        volio.save_volume(out / f"case{i:04d}_img", image[0], kind="image")
        volio.save_volume(out / f"case{i:04d}_lab", labels, kind="labels")
    print(f"wrote {len(pairs)} phantom pair(s) to {out}")
    return 0


def _load_pairs(data_dir):
    data_dir = Path(data_dir)
    imgs = sorted(data_dir.glob("*_img.json"))
    if not imgs:
        raise DataError(f"no *_img.json volumes under {data_dir}")
    pairs = []
    for meta in imgs:
        base = meta.with_suffix("")  # strips .json -> NAME_img
        stem = base.name[:-4]
        image, _ = volio.load_volume(base)
        labels, _ = volio.load_volume(data_dir / f"{stem}_lab")
        pairs.append((image[None].astype(np.float64), labels.astype(np.int64)))
    return pairs


def _cmd_train(args):
    pairs = _load_pairs(args.data)
    if not 0 <= args.val_count < len(pairs):
        raise ConfigError(f"val-count {args.val_count} out of range for "
                          f"{len(pairs)} volumes")
    split = len(pairs) - args.val_count
    train_pairs, val_pairs = pairs[:split], pairs[split:]
    extents = train_pairs[0][0].shape[1:]
    classes = max(int(lab.max()) for _, lab in pairs) + 1
    cfg = network.make_config(args.preset, extents=extents,
                              classes=max(classes, 2))
    net = network.build(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = train.TrainConfig(lr=args.lr, weight_decay=args.weight_decay,
                             lr_decay=args.lr_decay,
                             epochs=args.epochs, seed=args.seed,
                             target_dsc=args.target_dsc,
                             log_every=args.log_every)
    history = train.train_loop(net, train_pairs, val_pairs, tcfg,
                               csv_path=out / "history.csv",
                               checkpoint_path=out / "model.ckpt")
    last = history[-1]
    print(f"done: {len(history)} epoch(s), loss {last['loss']:.4f}, "
          f"mean_dsc {last['mean_dsc']:.4f}")
    return 0


def _cmd_infer(args):
    net = volio.load_network(args.checkpoint)
    image, meta = volio.load_volume(args.image)
    window = _parse_extents(args.window) if args.window else None
    normalized = train.normalize_volume(image[None])
    logits = train.sliding_window_infer(net, normalized, window=window,
                                        overlap=args.overlap,
                                        fusion=args.fusion)
    labels = np.argmax(logits, axis=0).astype(np.uint8)
    volio.save_volume(args.out, labels, spacing=meta.get("spacing", (1, 1, 1)),
                      kind="labels")
    print(f"wrote labels to {args.out}.raw")
    return 0


def _cmd_eval(args):
    pred, _ = volio.load_volume(args.pred)
    ref, meta = volio.load_volume(args.ref)
    classes = args.classes or int(max(pred.max(), ref.max())) + 1
    spacing = tuple(meta.get("spacing", (1.0, 1.0, 1.0)))
    rows = metrics.evaluate_pair(pred, ref, classes, spacing, hd95=args.hd95)
    header = "label    dsc%      hausdorff" + ("      hd95" if args.hd95 else "")
    print(header)
    for row in rows:
        hd = "undefined" if row["hausdorff"] is None else f"{row['hausdorff']:9.4f}"
        line = f"{row['label']:>5d} {row['dsc']:8.3f} {hd:>14s}"
        if args.hd95:
            h95 = "undefined" if row["hd95"] is None else f"{row['hd95']:9.4f}"
            line += f" {h95:>9s}"
        print(line)
    per = metrics.per_class_dsc(pred, ref, classes)
    present = ~np.isnan(per)
    if present.any():
        print(f"mean dsc {100.0 * float(per[present].mean()):.3f} over "
              f"{int(present.sum())} label(s); "
              f"{int((~present).sum())} absent from both sides excluded")
    else:
        print("mean dsc undefined (no label present on either side)")
    hds = [row["hausdorff"] for row in rows]
    defined = [h for h in hds if h is not None]
    if defined:
        print(f"mean hausdorff {float(np.mean(defined)):.4f} over "
              f"{len(defined)} label(s); {len(hds) - len(defined)} undefined "
              f"excluded")
    else:
        print(f"mean hausdorff undefined ({len(hds)} undefined excluded)")
    if args.out:
        case = Path(args.pred).name
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["case", "class", "dsc", "hd"])
            for row in rows:
                hd = "" if row["hausdorff"] is None else repr(row["hausdorff"])
                w.writerow([case, row["label"], repr(row["dsc"]), hd])
        print(f"wrote {args.out}")
    return 0


def _cmd_bench(args):
    ops = args.ops.split(",") if args.ops else None
    rows = bench.run(ops=ops, out_csv=args.out)
    print("op       backend   size       seconds        bytes")
    for op, backend, size, sec, nbytes in rows:
        print(f"{op:8s} {backend:8s} {size:>10d} {sec:12.6f} {nbytes:>12d}")
    for op, fit in (("scan", bench.scan_length_slope),
                    ("mamba", bench.mamba_length_slope),
                    ("fft3", bench.fft3_model_slope)):
        if ops is None or op in ops:
            print(f"{op} scaling slope: {fit():.3f}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args):
    names = None if (args.all or not args.case) else list(args.case)
    rows = gradcheck.run_suite(seed=args.seed, samples=args.samples, names=names)
    print("case              worst-rel-err  checked  seconds")
    worst = 0.0
    for r in rows:
        worst = max(worst, r["worst"])
        print(f"{r['name']:17s} {r['worst']:13.3e} {r['checked']:8d} "
              f"{r['seconds']:8.2f}")
    print(f"suite worst: {worst:.3e} ({'pass' if worst < 1e-4 else 'FAIL'})")
    return 0 if worst < 1e-4 else 1


def _cmd_params(args):
    make = network.desk_config if args.scale == "desk" else network.full_config
    presets = args.preset or ["variant-a", "variant-b", "emnet", "variant-c"]
    print("preset      stage blocks                        params        flops")
    for preset in presets:
        cfg = make(preset)
        net = network.build(cfg, seed=args.seed)
        kinds = ",".join(cfg.stage_blocks)
        print(f"{preset:11s} {kinds:34s} {network.count_params(net):>12,} "
              f"{network.count_flops(net):>14,}")
    return 0


_COMMANDS = {
    "gen-phantom": _cmd_gen_phantom,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            defaults = {a.dest: a.default
                        for a in parser.sub_map[args.command]._actions}
            args = _apply_config_file(args, defaults)
        set_precision(args.precision)
        return _COMMANDS[args.command](args)
    except EmnetError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
