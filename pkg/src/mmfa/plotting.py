"""Figures: per-sample fused-map overlays and hyperparameter sweep curves."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

SWEEP_LABELS = {
    "lam": r"$\lambda$",
    "local_bank_size": r"local bank size $n^L$",
}
METRIC_LABELS = {"i_auroc": "I-AUROC", "p_auroc": "P-AUROC", "aupro": "AUPRO"}

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def overlay(rgb, fused, gt=None, title: str = "", vmax: float | None = None):
    """Image, fused score map, and the map blended over the image."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.2, 2.6))
        axes[0].imshow(np.clip(rgb, 0, 1))
        axes[0].set_title("input")
        im = axes[1].imshow(fused, cmap="inferno", vmin=0, vmax=vmax)
        axes[1].set_title("fused score")
        fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
        axes[2].imshow(np.clip(rgb, 0, 1))
        axes[2].imshow(fused, cmap="jet", alpha=0.45, vmin=0, vmax=vmax)
        if gt is not None and gt.any():
            axes[2].contour(gt.astype(float), levels=[0.5], colors="white", linewidths=0.8)
        axes[2].set_title("overlay")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
    return fig


def plot_overlays(records: list[dict], manifest, out_dir) -> list[Path]:
    """One PNG per scored sample. ``records`` come from :func:`metrics.load_results`."""
    from .dataio import load_sample

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        return []
    vmax = max(float(r["fused_map"].max()) for r in records) or None
    paths = []
    for rec in records:
        sample = load_sample(manifest, rec["sample_id"])
        fig = overlay(sample.rgb, rec["fused_map"], sample.gt_mask,
                      f"{rec['sample_id']} ({sample.label}) score={rec['image_score_fused']:.3f}",
                      vmax)
        path = out_dir / f"{rec['sample_id']}_overlay.png"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def read_sweep(path) -> tuple[str, list[dict]]:
    rows = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
    param = rows[0]["param"] if rows else Path(path).stem
    return param, rows


def plot_sweep(param: str, rows: list[dict], path) -> Path:
    """Mean metric against the swept value (one line per metric)."""
    xs = np.array([r["value"] for r in rows], dtype=float)
    order = np.argsort(xs, kind="stable")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        for key, label in METRIC_LABELS.items():
            ys = np.array([r.get(key, np.nan) for r in rows], dtype=float)
            ax.plot(xs[order], ys[order], marker="o", ms=3, lw=1.2, label=label)
        if param == "local_bank_size":
            ax.set_xscale("log")
        ax.set_xlabel(SWEEP_LABELS.get(param, param))
        ax.set_ylabel("mean over categories")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_sweeps(sweep_dir, out_dir) -> list[Path]:
    sweep_dir, out_dir = Path(sweep_dir), Path(out_dir)
    if not sweep_dir.is_dir():
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in sorted(sweep_dir.glob("*.jsonl")):
        param, rows = read_sweep(f)
        if rows:
            paths.append(plot_sweep(param, rows, out_dir / f"sweep_{param}.png"))
    return paths
