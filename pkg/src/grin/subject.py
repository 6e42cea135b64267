"""Subject bags: one subject's multi-view, multi-modality predictions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cavf

MACULA6 = "macula6"
MACULA12 = "macula12"
DISC6 = "disc6"
AUXILIARY = "auxiliary"
SCAN_KINDS = (MACULA6, MACULA12, DISC6, AUXILIARY)

MACULA_KINDS = (MACULA6, MACULA12)


@dataclass
class View:
    """One acquisition of a subject.

    `probs` is the (H,W,C) class-probability prediction. Auxiliary views use
    their own channel layout and carry `class_map`, sending each non-background
    channel into the shared CAVF classes (artery/vein).
    """

    domain: str
    scan_kind: str
    probs: np.ndarray
    class_map: dict[int, int] | None = None
    replicas: list[np.ndarray] | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.scan_kind not in SCAN_KINDS:
            raise ValueError(f"unknown scan kind {self.scan_kind!r}")
        if self.scan_kind == AUXILIARY:
            if not self.class_map:
                raise ValueError("auxiliary views need a class map")
            targets = set(self.class_map.values())
            if not targets <= set(cavf.SHARED_AUX_CLASSES):
                raise ValueError("auxiliary class map must target artery/vein")


@dataclass
class SubjectBag:
    subject_id: str
    views: list[View] = field(default_factory=list)

    def indices_of(self, *scan_kinds: str) -> list[int]:
        return [i for i, v in enumerate(self.views) if v.scan_kind in scan_kinds]

    def macula_view_indices(self) -> list[int]:
        return self.indices_of(*MACULA_KINDS)


def cavf_probs(view: View) -> np.ndarray:
    """View probabilities in the 5-channel CAVF space.

    Auxiliary channels are scattered through the class map; unmapped mass
    lands in background.
    """
    if view.scan_kind != AUXILIARY:
        return np.asarray(view.probs, dtype=np.float64)
    p = np.asarray(view.probs, dtype=np.float64)
    out = np.zeros((*p.shape[:2], cavf.N_CLASSES), dtype=np.float64)
    mapped = np.zeros(p.shape[:2], dtype=np.float64)
    for src_c, dst_c in view.class_map.items():
        out[:, :, dst_c] += p[:, :, src_c]
        mapped += p[:, :, src_c]
    out[:, :, cavf.BACKGROUND] = np.clip(1.0 - mapped, 0.0, None)
    return out


def vesselness_of(view: View) -> np.ndarray:
    """Vessel probability used for registration: capillary+artery+vein for
    CAVF views, the mapped vessel channels for auxiliary views."""
    if view.scan_kind == AUXILIARY:
        p = np.asarray(view.probs, dtype=np.float64)
        vess = np.zeros(p.shape[:2], dtype=np.float64)
        for src_c, dst_c in view.class_map.items():
            if dst_c in (cavf.CAPILLARY, cavf.ARTERY, cavf.VEIN):
                vess += p[:, :, src_c]
        return np.clip(vess, 0.0, 1.0)
    from .registration import extract_vesselness

    return extract_vesselness(view.probs)
