"""``dest`` command line: train, eval, count, bench.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time

import numpy as np

from . import plotting
from .blocks import AttentionConfig, SimplifiedAttention, SoftmaxAttention
from .counting import instrumented_macs
from .metrics import DepthMetrics, eigen_metrics, spearman
from .networks import DepthNet, variant
from .tensor import Tensor, no_grad
from .training import NumericalError, RunConfig, build_networks, load_run, predict_depth, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _run_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    if getattr(args, "variant", None):
        raw["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        raw["steps"] = args.steps
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _out_dir(args, default: str) -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, "runs/train")
    cfg.checkpoint = cfg.checkpoint or os.path.join(out, "checkpoint")
    cfg.log = cfg.log or os.path.join(out, "train_log.csv")
    try:
        _, _, rows = train(cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if rows:
        plotting.loss_curve(rows, os.path.join(out, "loss.png"))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    if args.checkpoint:
        try:
            cfg, depth_net, _ = load_run(args.checkpoint)
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    else:
        cfg = _run_config(args)
        depth_net = None if args.oracle else build_networks(cfg)[0]
    seeds = range(args.first_scene, args.first_scene + args.scenes)
    per_scene, rows = [], []
    last = None
    for s in seeds:
        scene = cfg.scene(s)
        gt = scene.gt_depth[0].astype(np.float64)
        pred = gt.copy() if depth_net is None else predict_depth(depth_net, scene.cur, cfg)
        m = eigen_metrics(pred, gt)
        rho = 1.0 if depth_net is None else spearman(pred, gt)
        per_scene.append(m)
        rows.append({"scene": s, **vars(m), "spearman": rho})
        last = (scene, gt, pred)
    mean = DepthMetrics.average(per_scene)
    print(mean.record())
    if args.out:
        out = _out_dir(args, "")
        with open(os.path.join(out, "eval.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        summary = {**vars(mean), "spearman": float(np.mean([r["spearman"] for r in rows])),
                   "scenes": list(seeds), "checkpoint": args.checkpoint, "oracle": args.oracle}
        with open(os.path.join(out, "eval.json"), "w") as fh:
            json.dump(summary, fh, indent=1)
        scene, gt, pred = last
        plotting.depth_panels(scene.cur, gt, pred * np.median(gt) / np.median(pred),
                              os.path.join(out, "depth.png"))
    return EXIT_OK


# -- count --------------------------------------------------------------------

def model_info(name: str, h: int, w: int) -> dict:
    cfg = variant(name)
    cfg.check_input(h, w)
    net = DepthNet(cfg)
    stages = net.stage_report(h, w)
    sizes = [tuple(s["shape"][1:]) for s in stages]
    return {
        "variant": name, "input": [h, w],
        "params": net.num_parameters(), "macs": net.macs(h, w),
        "stages": stages,
        "decoder": {"params": net.decoder.num_parameters(), "macs": net.decoder.macs(sizes)},
        "counted": "Depth-Net only",
    }


def format_model_info(info: dict) -> str:
    lines = [f"{info['variant']} Depth-Net at {info['input'][1]}x{info['input'][0]}: "
             f"{info['params'] / 1e6:.2f} MParams, {info['macs'] / 1e9:.2f} GMACs"]
    for s in info["stages"]:
        c, h, w = s["shape"]
        lines.append(f"  stage {s['stage']}: [{c}, {h}, {w}] params={s['params']} macs={s['macs']}")
    d = info["decoder"]
    lines.append(f"  decoder: params={d['params']} macs={d['macs']}")
    return "\n".join(lines)


def cmd_count(args) -> int:
    try:
        info = model_info(args.variant or "B3", args.height, args.width)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(info) if args.json else format_model_info(info))
    if args.out:
        out = _out_dir(args, "")
        tag = f"{info['variant']}_{args.width}x{args.height}"
        with open(os.path.join(out, f"model_info_{tag}.json"), "w") as fh:
            json.dump(info, fh, indent=1)
        with open(os.path.join(out, f"model_info_{tag}.txt"), "w") as fh:
            fh.write(format_model_info(info) + "\n")
        plotting.stage_report(info, os.path.join(out, f"stages_{tag}.png"))
    return EXIT_OK


# -- bench --------------------------------------------------------------------

def bench_rows(h: int, w: int, channels: int, heads: int, ratio: int, repeats: int = 5,
               seed: int = 0, check: bool = True) -> list:
    cfg = AttentionConfig(channels, heads, ratio)
    x = Tensor(np.random.default_rng(seed).normal(size=(1, h * w, channels)))
    rows = []
    for name, cls in (("simplified", SimplifiedAttention), ("softmax", SoftmaxAttention)):
        layer = cls(cfg).init_parameters(seed)
        macs = layer.macs(h, w)
        with no_grad():
            if check:
                counted = instrumented_macs(lambda: layer(x, h, w))
                if counted != macs:
                    raise AssertionError(f"{name}: analytic {macs} != counted {counted} MACs")
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                layer(x, h, w)
                times.append(time.perf_counter_ns() - t0)
        rows.append({"variant": name, "macs": macs, "wall_ns": int(np.median(times))})
    return rows


def cmd_bench(args) -> int:
    try:
        rows = bench_rows(args.height, args.width, args.channels, args.heads, args.ratio,
                          args.repeats, args.seed or 0, not args.no_check)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["variant", "macs", "wall_ns"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())
    if args.out:
        out = _out_dir(args, "")
        with open(os.path.join(out, "bench.csv"), "w") as fh:
            fh.write(buf.getvalue())
        plotting.bench_bars(rows, os.path.join(out, "bench.png"))
    if rows[0]["macs"] >= rows[1]["macs"]:
        print("error: simplified attention is not cheaper than the softmax baseline",
              file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dest", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train Depth-Net and Pose-Net on synthetic scenes")
    t.add_argument("--config", help="JSON run config; every field is optional")
    t.add_argument("--variant", help="B0..B5, or B0-micro for B0 at 64x192")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="output directory (default runs/train)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="depth metrics on held-out synthetic scenes")
    e.add_argument("--checkpoint", help="checkpoint directory written by train")
    e.add_argument("--config")
    e.add_argument("--variant")
    e.add_argument("--seed", type=int, help="network seed when no checkpoint is given")
    e.add_argument("--first-scene", type=int, default=1000)
    e.add_argument("--scenes", type=int, default=10)
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="Depth-Net parameters and MACs")
    c.add_argument("--variant", default="B3")
    c.add_argument("--height", type=int, default=192)
    c.add_argument("--width", type=int, default=640)
    c.add_argument("--json", action="store_true", help="print the machine-readable report")
    c.add_argument("--out")
    c.set_defaults(func=cmd_count)

    b = sub.add_parser("bench", help="simplified vs softmax attention on one stage")
    b.add_argument("--height", type=int, default=64, help="token grid height")
    b.add_argument("--width", type=int, default=64, help="token grid width")
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--ratio", type=int, default=8, help="sequence reduction ratio")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int)
    b.add_argument("--no-check", action="store_true", help="skip the instrumented recount")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
