"""I-AUROC, P-AUROC and AUPRO, plus loading of scorer result files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import FormatError, UndefinedMetricError

DEFAULT_FPR_LIMIT = 0.3
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("AUROC needs both positive and negative examples")
    return y


def auroc(scores, labels) -> float:
    """Mann-Whitney form: P(pos > neg) + 0.5 P(tie), via mid-ranks."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    ranks = rankdata(s, method="average")
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """``(fpr, tpr)`` at every distinct threshold, starting at (0, 0)."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    return np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]]


def auroc_trapezoid(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def p_auroc(score_maps, gt_masks, fg_masks=None) -> float:
    """Pixel AUROC over all pixels (or only foreground pixels when given)."""
    s = np.stack([np.asarray(m, dtype=np.float64) for m in score_maps])
    g = np.stack([np.asarray(m, dtype=bool) for m in gt_masks])
    if s.shape != g.shape:
        raise ValueError(f"score maps {s.shape} and masks {g.shape} differ")
    if fg_masks is not None:
        keep = np.stack([np.asarray(m, dtype=bool) for m in fg_masks]) | g
        return auroc(s[keep], g[keep])
    return auroc(s, g)


def pro_curve(score_maps, gt_masks):
    """Exact PRO-vs-FPR curve over all distinct score thresholds (``score >= t``).

    Components are 8-connected regions of each ground-truth mask; FPR counts
    every non-anomalous pixel of every map.
    """
    s = np.stack([np.asarray(m, dtype=np.float64) for m in score_maps])
    g = np.stack([np.asarray(m, dtype=bool) for m in gt_masks])
    if s.shape != g.shape:
        raise ValueError(f"score maps {s.shape} and masks {g.shape} differ")
    comp = np.zeros(g.shape, dtype=np.int64)
    n_comp = 0
    for i in range(len(g)):
        lab, n = ndimage.label(g[i], structure=EIGHT_CONNECTED)
        comp[i] = np.where(lab > 0, lab + n_comp, 0)
        n_comp += n
    if n_comp == 0:
        raise UndefinedMetricError("AUPRO needs at least one anomalous pixel")
    normal = ~g.ravel()
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("AUPRO needs at least one normal pixel")
    flat = s.ravel()
    order = np.argsort(-flat, kind="stable")
    flat = flat[order]
    ends = np.r_[np.nonzero(np.diff(flat))[0], flat.size - 1]
    fpr = np.cumsum(normal[order])[ends] / n_normal
    # per-component overlap ratios from integer counts, so a fully covered
    # component contributes exactly 1
    comp = comp.ravel()[order]
    sizes = np.bincount(comp, minlength=n_comp + 1)
    pro = np.zeros(len(ends))
    for c in range(1, n_comp + 1):
        pro += np.cumsum(comp == c)[ends] / sizes[c]
    return np.r_[0.0, fpr], np.r_[0.0, pro / n_comp]


def integrate_to_limit(x, y, limit: float) -> float:
    """Trapezoidal area under a piecewise-linear curve on ``[0, limit]``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = x <= limit
    xs, ys = x[inside], y[inside]
    if xs[-1] < limit and inside.sum() < len(x):
        j = int(np.argmax(~inside))
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(score_maps, gt_masks, fpr_limit: float = DEFAULT_FPR_LIMIT) -> float:
    """Area under the PRO curve up to ``fpr_limit``, divided by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(score_maps, gt_masks)
    # integrate the shortfall 1 - PRO: a perfect curve then gives exactly 1
    missing = integrate_to_limit(fpr, 1.0 - pro, fpr_limit)
    return float(min(1.0, max(0.0, 1.0 - missing / fpr_limit)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    i_auroc: float
    p_auroc: float
    aupro: float
    fpr_limit: float = DEFAULT_FPR_LIMIT
    per_category: dict = field(default_factory=dict)


def load_results(path) -> tuple[dict, list[dict]]:
    """Read a ``results.jsonl`` file; each record gains a ``fused_map`` array."""
    from .scorer import RESULTS_FORMAT, load_map

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"results file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty results file")
    header = json.loads(lines[0])
    if header.get("format") != RESULTS_FORMAT:
        raise FormatError(f"{path}: unexpected format {header.get('format')!r}")
    records = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        rec["fused_map"] = load_map(path.parent / rec["map"])
        records.append(rec)
    return header, records


def evaluate_category(records: list[dict], manifest, fpr_limit: float = DEFAULT_FPR_LIMIT) -> dict:
    """Metrics of one category from loaded result records and the test manifest."""
    from .dataio import load_sample

    labels, scores, maps, gts, fgs = [], [], [], [], []
    for rec in records:
        sample = load_sample(manifest, rec["sample_id"])
        labels.append(sample.is_anomalous)
        scores.append(rec["image_score_fused"])
        maps.append(rec["fused_map"])
        gts.append(sample.gt_mask if sample.gt_mask is not None else np.zeros(sample.image_size, bool))
        fgs.append(sample.fg_mask)
    return {"i_auroc": auroc(scores, labels), "p_auroc": p_auroc(maps, gts, fgs),
            "aupro": aupro(maps, gts, fpr_limit)}


def summarize(per_category: dict[str, dict], fpr_limit: float = DEFAULT_FPR_LIMIT) -> MetricReport:
    means = {k: float(np.mean([v[k] for v in per_category.values()]))
             for k in ("i_auroc", "p_auroc", "aupro")}
    return MetricReport(per_category=per_category, fpr_limit=fpr_limit, **means)


def report_csv(report: MetricReport) -> str:
    """Categories as columns plus ``mean``; one row per metric."""
    cats = list(report.per_category)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *cats, "mean"])
    for key, name in (("i_auroc", "I-AUROC"), ("p_auroc", "P-AUROC"),
                      ("aupro", f"AUPRO@{report.fpr_limit:g}")):
        w.writerow([name, *(f"{report.per_category[c][key]:.6f}" for c in cats),
                    f"{getattr(report, key):.6f}"])
    return buf.getvalue()


def report_json(report: MetricReport) -> str:
    return json.dumps({"i_auroc": report.i_auroc, "p_auroc": report.p_auroc,
                       "aupro": report.aupro, "fpr_limit": report.fpr_limit,
                       "per_category": report.per_category}, indent=2, sort_keys=True) + "\n"
