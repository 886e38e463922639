"""Command-line interface.

Subcommands: gradcheck, oracle, synth, trimap, composite, train, infer,
eval, count, export-kernels. Exit codes: 0 success, 1 check or evaluation
failure, 2 usage error. The ``TMF_SEED`` environment variable overrides
any ``--seed`` flag. Every subcommand is deterministic under a fixed seed
in a single-threaded run, never mutates its inputs, and writes only under
the requested output path.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, data
from .blocks import GlfFusion, export_kernel_maps
from .gradcheck import GradCheckFailure
from .data import (DatasetManifest, ImageDecodeError, Trimap, composite,
                   gen_trimap, pad_to_multiple, read_gray_levels, read_image,
                   unpad, write_image)
from .metrics import aggregate, evaluate_pair
from .model import (ArchConfig, build_network, count_flops, count_params,
                    load_network, save_weights)
from .training import LoadedMattingData, TrainConfig, train_network

PRESETS = {
    "toy-ours": ArchConfig.toy_ours,
    "toy-baseline": ArchConfig.toy_baseline,
    "paper-ours": ArchConfig.paper_ours,
    "paper-baseline": ArchConfig.paper_baseline,
}


def _resolve_seed(args) -> int:
    env = os.environ.get("TMF_SEED")
    if env is not None:
        return int(env)
    return int(getattr(args, "seed", 0))


def _load_config(args, parser) -> ArchConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            parser.error(f"config file not found: {path}")
        return ArchConfig.from_json(path.read_text())
    return PRESETS[args.preset]()


def _add_config_flags(p):
    p.add_argument("--config", help="architecture config JSON path")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy-ours",
                   help="built-in architecture preset (ignored with --config)")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args, parser) -> int:
    if args.scope != "all" and args.scope not in checks.GRADCHECK_SCOPES:
        parser.error(f"unknown op {args.scope!r}; choose from "
                     f"{', '.join(sorted(checks.GRADCHECK_SCOPES))} or 'all'")
    try:
        report = checks.run_gradcheck(args.scope)
    except GradCheckFailure as exc:
        print(f"FAIL {exc}")
        return 1
    failed = False
    for name, err in report.items():
        status = "ok" if err <= 1e-3 else "FAIL"
        failed |= err > 1e-3
        print(f"{status:4s} {name:20s} max rel err {err:.3e}")
    return 1 if failed else 0


def cmd_oracle(args, parser) -> int:
    if args.scope != "all" and args.scope not in checks.ORACLE_SCOPES:
        parser.error(f"unknown oracle scope {args.scope!r}; choose from "
                     f"{', '.join(sorted(checks.ORACLE_SCOPES))} or 'all'")
    report = checks.run_oracles(args.scope, trials=args.trials, seed=_resolve_seed(args))
    failed = False
    for name, rep in report.items():
        ok = rep["max_abs_diff"] <= (1e-6 if name == "metrics" else 1e-5)
        failed |= not ok
        line = f"{'ok' if ok else 'FAIL':4s} {name:8s} max abs diff {rep['max_abs_diff']:.3e}"
        if "throughput_note" in rep:
            line += f"  [{rep['throughput_note']}, speedup x{rep['speedup']:.1f}]"
        print(line)
    return 1 if failed else 0


def cmd_synth(args, parser) -> int:
    data.generate_dataset(args.n, _resolve_seed(args), args.out, size=args.size)
    print(f"wrote {args.n} samples under {args.out}")
    return 0


def cmd_trimap(args, parser) -> int:
    alpha = read_image(args.alpha)
    if alpha.ndim != 2:
        parser.error(f"{args.alpha} is not a grayscale alpha image")
    trimap = gen_trimap(alpha, args.k_dilate, args.k_erode)
    write_image(args.out, trimap.to_gray() / 255.0, bits=8)
    print(f"wrote trimap {args.out}")
    return 0


def cmd_composite(args, parser) -> int:
    fg = read_image(args.fg)
    bg = read_image(args.bg)
    alpha = read_image(args.alpha)
    if alpha.ndim != 2:
        parser.error(f"{args.alpha} is not a grayscale alpha image")
    write_image(args.out, composite(fg, bg, alpha))
    print(f"wrote composite {args.out}")
    return 0


def cmd_train(args, parser) -> int:
    cfg = _load_config(args, parser)
    seed = _resolve_seed(args)
    data_dir = Path(args.data)
    if not data_dir.exists():
        print(f"error: dataset directory not found: {data_dir}", file=sys.stderr)
        return 1
    try:
        pool = LoadedMattingData(data.load_dataset(data_dir))
    except (FileNotFoundError, ImageDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = build_network(cfg, seed=seed)
    tc = TrainConfig(iterations=args.iters, batch_size=args.batch,
                     crop_size=args.crop, lr=args.lr, seed=seed,
                     checkpoint_every=args.checkpoint_every)
    (out_dir / "config.json").write_text(cfg.to_json())
    rows = train_network(net, pool, tc, log_path=out_dir / "loss_log.csv",
                         checkpoint_dir=out_dir)
    if rows:
        print(f"trained {len(rows)} iterations; final L_total {rows[-1]['L_total']:.4f}")
    else:
        print("trained 0 iterations; checkpoint equals initialization")
    return 0


def cmd_infer(args, parser) -> int:
    net = load_network(args.weights)
    image = read_image(args.image)
    if image.ndim != 3:
        parser.error(f"{args.image} is not an RGB image")
    trimap = Trimap.from_gray(read_gray_levels(args.trimap))
    if trimap.shape != image.shape[1:]:
        print("error: image and trimap sizes differ", file=sys.stderr)
        return 1
    image_p, trimap_p, original = pad_to_multiple(image, trimap, 16)
    pred = net.predict(image_p.astype(np.float32), trimap_p)
    write_image(args.out, unpad(pred, original), bits=args.bits)
    print(f"wrote alpha {args.out}")
    return 0


def cmd_eval(args, parser) -> int:
    pred_dir, gt_dir, tri_dir = Path(args.pred_dir), Path(args.gt_dir), Path(args.trimap_dir)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        print(f"error: no ground-truth PNGs under {gt_dir}", file=sys.stderr)
        return 1
    records, errors = [], []
    for name in names:
        try:
            pred = read_image(pred_dir / name)
            gt = read_image(gt_dir / name)
            trimap = Trimap.from_gray(read_gray_levels(tri_dir / name))
        except (FileNotFoundError, ImageDecodeError) as exc:
            errors.append({"image_id": name, "error": str(exc)})
            continue
        rec = {"image_id": name}
        rec.update(evaluate_pair(pred, gt, trimap.unknown_mask()))
        records.append(rec)
    doc = {"per_image": records, "aggregate": aggregate(records), "errors": errors}
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 1 if errors else 0


def cmd_count(args, parser) -> int:
    cfg = _load_config(args, parser)
    net = build_network(cfg, seed=0)
    twin = build_network(cfg.baseline_twin(), seed=0)
    ours_p = count_params(net)
    twin_p = count_params(twin)
    ours_f = count_flops(net, args.height, args.width)
    twin_f = count_flops(twin, args.height, args.width)
    ctx_ours = next(r["params"] for r in ours_p.rows if r["module"] == "context")
    ctx_twin = next(r["params"] for r in twin_p.rows if r["module"] == "context")
    doc = {
        "input_size": [args.height, args.width],
        "configured": ours_f.to_dict(),
        "baseline_twin": twin_f.to_dict(),
        "context_param_parity": {
            "configured_context": ctx_ours,
            "ppm_context": ctx_twin,
            "equal": ctx_ours == ctx_twin,
        },
        "params_ratio": ours_p.total_params / twin_p.total_params,
        "flops_ratio": ours_f.total_macs / twin_f.total_macs,
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_export_kernels(args, parser) -> int:
    stage_index = {"f1": 0, "f2": 1, "f3": 2}.get(args.stage)
    if stage_index is None:
        parser.error(f"invalid stage {args.stage!r}; expected f1, f2 or f3")
    net = load_network(args.weights)
    stage = net.stages[stage_index]
    if not isinstance(stage, GlfFusion):
        print(f"error: stage {args.stage} is static fusion; no kernel field to export",
              file=sys.stderr)
        return 1
    image = read_image(args.image)
    trimap = Trimap.from_gray(read_gray_levels(args.trimap))
    image_p, trimap_p, _ = pad_to_multiple(image, trimap, 16)
    stage.record_kernels = True
    try:
        net.predict(image_p.astype(np.float32), trimap_p)
    finally:
        stage.record_kernels = False
    paths = export_kernel_maps(stage.last_kernels, args.out_dir, stage.groups,
                               prefix=f"{args.stage}_kernel")
    print(f"wrote {len(paths)} kernel maps under {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmf",
        description="Trimap-guided matting network: verification, training, "
                    "inference, evaluation, cost accounting, visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", default="all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("oracle", help="fast-path vs naive/reference equivalence")
    p.add_argument("--scope", default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("trimap", help="trimap from an alpha matte")
    p.add_argument("--alpha", required=True)
    p.add_argument("--k-dilate", type=int, default=10)
    p.add_argument("--k-erode", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_trimap)

    p = sub.add_parser("composite", help="compose foreground over background")
    p.add_argument("--fg", required=True)
    p.add_argument("--bg", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_composite)

    p = sub.add_parser("train", help="train on a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory from 'synth'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict an alpha matte")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--trimap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--trimap-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("count", help="parameter/FLOPs report vs the baseline twin")
    _add_config_flags(p)
    p.add_argument("--height", type=int, default=2048)
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("export-kernels", help="export fusion kernel maps as images")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--trimap", required=True)
    p.add_argument("--stage", required=True, help="f1, f2 or f3")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_export_kernels)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, parser)
    except (FileNotFoundError, ImageDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
