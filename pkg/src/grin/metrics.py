"""Segmentation evaluation: Dice, average symmetric surface distance, and
the optic-disc FAZ pass/fail convention."""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from . import cavf
from ._kernels import min_cross_dist


def dice(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Dice overlap 2|P∩T| / (|P|+|T|) for one class; 1.0 when both empty."""
    p = np.asarray(pred) == class_id
    t = np.asarray(truth) == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(N,2) array of (x, y) boundary coordinates under 4-connectivity.

    A mask pixel is boundary when any 4-neighbour is outside the mask
    (image border counts as outside).
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.empty((0, 2), dtype=np.float64)
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = (
        m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    )
    ys, xs = np.nonzero(m & ~inner)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def assd(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float | None:
    """Average symmetric surface distance in pixels; None when either mask
    is empty (missing value, excluded from aggregates)."""
    p = np.asarray(pred) == class_id
    t = np.asarray(truth) == class_id
    if not p.any() or not t.any():
        return None
    bp = boundary_pixels(p)
    bt = boundary_pixels(t)
    d_pt = min_cross_dist(bp, bt)
    d_tp = min_cross_dist(bt, bp)
    return float((d_pt.sum() + d_tp.sum()) / (len(bp) + len(bt)))


def faz_disc_score(pred: np.ndarray, scan_kind: str) -> float:
    """100 when a disc-scan prediction contains no FAZ pixels, else 0."""
    if scan_kind != "disc6":
        raise ValueError(f"FAZ disc score only applies to disc6 scans, got {scan_kind!r}")
    return 100.0 if not (np.asarray(pred) == cavf.FAZ).any() else 0.0


def aggregate(
    records: list[dict],
    group_keys: tuple[str, ...] = ("method", "domain", "class_name", "metric"),
    baseline_method: str | None = None,
) -> list[dict]:
    """Group per-image metric records and report mean, population standard
    deviation and count per group.

    Each record needs the group keys plus a "value" (None values are
    dropped as missing). When `baseline_method` is given, every row gains a
    "delta" against the matching baseline row.
    """
    groups: dict[tuple, list[float]] = defaultdict(list)
    for rec in records:
        if rec.get("value") is None:
            continue
        groups[tuple(rec[k] for k in group_keys)].append(float(rec["value"]))
    rows = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        row = dict(zip(group_keys, key))
        row.update(
            mean=float(vals.mean()), std=float(vals.std(ddof=0)), n=int(len(vals))
        )
        rows.append(row)
    if baseline_method is not None and "method" in group_keys:
        base = {
            tuple(r[k] for k in group_keys if k != "method"): r["mean"]
            for r in rows
            if r["method"] == baseline_method
        }
        for r in rows:
            key = tuple(r[k] for k in group_keys if k != "method")
            r["delta"] = r["mean"] - base[key] if key in base else math.nan
    return rows
