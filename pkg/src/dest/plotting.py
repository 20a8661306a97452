"""Report figures written straight to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(rows: list, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in rows]
    for key in ("loss", "photo"):
        ax.plot(steps, [r[key] for r in rows], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.legend(frameon=False)
    return _save(fig, path)


def stage_report(report: dict, path: str) -> str:
    """Per-stage parameters and MACs of one Depth-Net variant."""
    stages = report["stages"]
    labels = [f"stage {s['stage']}" for s in stages] + ["decoder"]
    params = [s["params"] for s in stages] + [report["decoder"]["params"]]
    macs = [s["macs"] for s in stages] + [report["decoder"]["macs"]]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.bar(labels, np.array(params) / 1e6, color="tab:blue")
    a1.set_ylabel("MParams")
    a2.bar(labels, np.array(macs) / 1e9, color="tab:orange")
    a2.set_ylabel("GMACs")
    for ax in (a1, a2):
        ax.tick_params(axis="x", rotation=30)
    fig.suptitle(f"{report['variant']} at {report['input'][1]}x{report['input'][0]}")
    return _save(fig, path)


def bench_bars(rows: list, path: str) -> str:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    names = [r["variant"] for r in rows]
    a1.bar(names, [r["macs"] / 1e6 for r in rows], color="tab:green")
    a1.set_ylabel("MMACs")
    a2.bar(names, [r["wall_ns"] / 1e6 for r in rows], color="tab:gray")
    a2.set_ylabel("wall time (ms)")
    return _save(fig, path)


def depth_panels(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, path: str) -> str:
    """Input frame, ground-truth depth and prediction side by side."""
    fig, axes = plt.subplots(3, 1, figsize=(6, 5.5))
    axes[0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    lo, hi = float(gt.min()), float(gt.max())
    axes[1].imshow(gt, cmap="magma_r", vmin=lo, vmax=hi)
    axes[2].imshow(pred, cmap="magma_r", vmin=lo, vmax=hi)
    for ax, title in zip(axes, ("frame t", "ground truth", "prediction (median scaled)")):
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    return _save(fig, path)
