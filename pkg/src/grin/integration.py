"""Region-wise fusion of registered predictions into integrated labels.

Two-stage geometry: macula-centered views are fused in a 512x512 common
space first; the fused macula map is then registered together with the
disc-centered, wide-field and auxiliary views, and the disc/other regions
are fused over the shared artery/vein classes. The combined map is reverted
into each view's original coordinates, overwriting only artery and vein.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cavf
from .geometry import Homography, warp
from .registration import BagRegistration
from .subject import (
    AUXILIARY,
    DISC6,
    MACULA12,
    MACULA6,
    SubjectBag,
    cavf_probs,
)

COMMON_SIZE = 512
MACULA_WINDOW = 256

MACULA = 0
DISC = 1
OTHER = 2
REGION_NAMES = ("macula", "disc", "other")


class PolicyError(ValueError):
    """An integration policy cannot be applied to this bag."""


@dataclass(frozen=True)
class IntegrationPolicy:
    """Which scan kinds fuse each region, and over which classes.

    Background and capillary are never fused (their cross-device variability
    is too high); only artery and vein are written back into the views.
    """

    macula_kinds: tuple[str, ...] = (MACULA6, MACULA12)
    disc_kinds: tuple[str, ...] = (DISC6, AUXILIARY)
    other_kinds: tuple[str, ...] = (MACULA12, AUXILIARY)
    macula_classes: tuple[int, ...] = (cavf.ARTERY, cavf.VEIN, cavf.FAZ)
    shared_classes: tuple[int, ...] = (cavf.ARTERY, cavf.VEIN)
    back_transform_classes: tuple[int, ...] = (cavf.ARTERY, cavf.VEIN)

    def kinds_for(self, region: int) -> tuple[str, ...]:
        return (self.macula_kinds, self.disc_kinds, self.other_kinds)[region]

    def classes_for(self, region: int) -> tuple[int, ...]:
        return self.macula_classes if region == MACULA else self.shared_classes


@dataclass(frozen=True)
class RegionPartition:
    """Per-pixel region ids over the common canvas; macula is the central
    window and takes precedence over the disc disk."""

    region_ids: np.ndarray
    disc_center: tuple[float, float]
    disc_radius: float


@dataclass(frozen=True)
class IntegratedLabel:
    soft: np.ndarray
    hard: np.ndarray


@dataclass
class IntegrationConfig:
    common_size: int = COMMON_SIZE
    macula_window: int = MACULA_WINDOW
    disc_radius: float = 96.0
    default_disc_center: tuple[float, float] = (96.0, 256.0)


def resize_bilinear(map_: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize via the warp kernel."""
    arr = np.asarray(map_, dtype=np.float64)
    h, w = arr.shape[:2]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    sy = out_h / h
    sx = out_w / w
    m = np.array(
        [[sx, 0.0, (sx - 1.0) / 2.0], [0.0, sy, (sy - 1.0) / 2.0], [0.0, 0.0, 1.0]]
    )
    return warp(arr, Homography.from_matrix(m), out_h, out_w)


def pad_offsets(src: int, dst: int) -> tuple[int, int]:
    """Even zero-padding split; odd remainder goes to bottom/right."""
    total = dst - src
    before = total // 2
    return before, total - before


def to_common_space(map_: np.ndarray, scan_kind: str, size: int = COMMON_SIZE) -> np.ndarray:
    """Lift a native prediction into the common canvas.

    macula6 maps are zero-padded evenly; macula12, disc6 and auxiliary maps
    are resized bilinearly.
    """
    arr = np.asarray(map_, dtype=np.float64)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"expected a square map, got {arr.shape[:2]}")
    if scan_kind == MACULA6:
        if arr.shape[0] > size:
            raise ValueError("macula6 map larger than the common canvas")
        before, after = pad_offsets(arr.shape[0], size)
        pads = ((before, after), (before, after)) + ((0, 0),) * (arr.ndim - 2)
        return np.pad(arr, pads)
    return resize_bilinear(arr, size, size)


def from_common_space(map_: np.ndarray, scan_kind: str, native: int, size: int = COMMON_SIZE) -> np.ndarray:
    """Inverse of `to_common_space`: crop for macula6, resize back otherwise."""
    arr = np.asarray(map_, dtype=np.float64)
    if scan_kind == MACULA6:
        before, _ = pad_offsets(native, size)
        return arr[before : before + native, before : before + native].copy()
    return resize_bilinear(arr, native, native)


def common_space_transform(scan_kind: str, native: int, size: int = COMMON_SIZE) -> Homography:
    """Coordinate map from native view pixels to common-canvas pixels."""
    if scan_kind == MACULA6:
        before, _ = pad_offsets(native, size)
        return Homography.translation(before, before)
    s = size / native
    m = np.array([[s, 0.0, (s - 1.0) / 2.0], [0.0, s, (s - 1.0) / 2.0], [0.0, 0.0, 1.0]])
    return Homography.from_matrix(m)


def ensemble_average(replicas: list[np.ndarray]) -> np.ndarray:
    """Channelwise arithmetic mean of model-replica predictions."""
    if not replicas:
        raise ValueError("need at least one replica")
    first = np.asarray(replicas[0], dtype=np.float64)
    stack = [first]
    for r in replicas[1:]:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != first.shape:
            raise ValueError(f"replica shape {r.shape} != {first.shape}")
        stack.append(r)
    return np.mean(stack, axis=0)


def build_partition(
    dims: tuple[int, int],
    disc_center: tuple[float, float],
    disc_radius: float,
    macula_window: int = MACULA_WINDOW,
) -> RegionPartition:
    """Split the canvas into macula (central window), disc (disk minus
    macula) and other."""
    h, w = dims
    cx, cy = disc_center
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"disc center {disc_center} outside the {dims} canvas")
    ids = np.full(dims, OTHER, dtype=np.uint8)
    ys, xs = np.mgrid[0:h, 0:w]
    disc = (xs - cx) ** 2 + (ys - cy) ** 2 <= disc_radius**2
    ids[disc] = DISC
    top = (h - macula_window) // 2
    left = (w - macula_window) // 2
    ids[top : top + macula_window, left : left + macula_window] = MACULA
    return RegionPartition(region_ids=ids, disc_center=(float(cx), float(cy)), disc_radius=float(disc_radius))


def fuse_region(
    maps: list[np.ndarray],
    region_mask: np.ndarray,
    fused_classes: tuple[int, ...],
    anchor_map: np.ndarray,
) -> np.ndarray:
    """Average selected registered maps over the region.

    Pixels where at least one selected view's argmax falls in
    `fused_classes` get the mean probability vector over the selected maps;
    all other pixels keep the anchor view's values.
    """
    if not maps:
        raise PolicyError("no selected views for this region")
    out = np.array(anchor_map, dtype=np.float64, copy=True)
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    argmaxes = stack.argmax(axis=3)
    trigger = np.zeros(region_mask.shape, dtype=bool)
    for c in fused_classes:
        trigger |= (argmaxes == c).any(axis=0)
    sel = region_mask & trigger
    out[sel] = stack.mean(axis=0)[sel]
    return out


def second_stage_indices(bag: SubjectBag) -> list[int]:
    """Bag view indices joining the second registration stage (after the
    fused macula map, which is always stage-two view 0)."""
    return bag.indices_of(DISC6, MACULA12, AUXILIARY)


def _warped_common_maps(
    bag: SubjectBag, indices: list[int], reg: BagRegistration, anchor: int, size: int
) -> dict[int, np.ndarray]:
    """Common-space maps of `indices` warped into the anchor frame."""
    out = {}
    for pos, idx in enumerate(indices):
        common = to_common_space(cavf_probs(bag.views[idx]), bag.views[idx].scan_kind, size)
        if pos == anchor:
            out[idx] = common
        else:
            outcome = reg.outcomes.get(pos)
            if outcome is None:
                continue
            out[idx] = warp(common, outcome.homography, size, size)
    return out


def fuse_macula_stage(
    bag: SubjectBag,
    reg1: BagRegistration,
    policy: IntegrationPolicy | None = None,
    cfg: IntegrationConfig | None = None,
) -> np.ndarray:
    """First-stage fusion: macula-centered views averaged over the central
    window, in the stage-one anchor frame."""
    policy = policy or IntegrationPolicy()
    cfg = cfg or IntegrationConfig()
    size = cfg.common_size
    macula_idx = bag.macula_view_indices()
    if not macula_idx:
        raise PolicyError("bag has no macula-centered views")
    warped = _warped_common_maps(bag, macula_idx, reg1, reg1.anchor_index, size)
    anchor_view = macula_idx[reg1.anchor_index]
    if anchor_view not in warped:
        raise PolicyError("stage-one anchor view unavailable")
    selected = [warped[i] for i in macula_idx if i in warped and bag.views[i].scan_kind in policy.macula_kinds]
    if not selected:
        raise PolicyError("no views selected for the macula region")
    top = (size - cfg.macula_window) // 2
    macula_mask = np.zeros((size, size), dtype=bool)
    macula_mask[top : top + cfg.macula_window, top : top + cfg.macula_window] = True
    return fuse_region(selected, macula_mask, policy.macula_classes, warped[anchor_view])


def integrate_subject(
    bag: SubjectBag,
    reg1: BagRegistration,
    reg2: BagRegistration,
    policy: IntegrationPolicy | None = None,
    cfg: IntegrationConfig | None = None,
) -> tuple[dict[int, IntegratedLabel], dict]:
    """Produce an IntegratedLabel per non-auxiliary view plus a manifest.

    reg1 registers the macula-centered views (bag order); reg2 registers
    [fused macula] + second_stage_indices(bag) (fused map first). Both must
    have succeeded.
    """
    policy = policy or IntegrationPolicy()
    cfg = cfg or IntegrationConfig()
    if not (reg1.success and reg2.success):
        raise PolicyError("both registration stages must succeed before integration")
    size = cfg.common_size

    fused_macula = fuse_macula_stage(bag, reg1, policy, cfg)

    stage2_idx = second_stage_indices(bag)
    # stage-two homographies into the stage-two anchor frame, keyed by bag view
    h2: dict[int, Homography] = {}
    warped2: dict[int, np.ndarray] = {}
    fused_in_frame = fused_macula
    anchor2 = reg2.anchor_index
    fallbacks: list[str] = []
    for pos, idx in enumerate(stage2_idx, start=1):
        view = bag.views[idx]
        common = to_common_space(cavf_probs(view), view.scan_kind, size)
        if pos == anchor2:
            h2[idx] = Homography.identity()
            warped2[idx] = common
        else:
            outcome = reg2.outcomes.get(pos)
            if outcome is None:
                fallbacks.append(f"view {idx} missing from stage-two registration")
                continue
            h2[idx] = outcome.homography
            warped2[idx] = warp(common, outcome.homography, size, size)
    if anchor2 == 0:
        fused_h2 = Homography.identity()
    else:
        outcome = reg2.outcomes.get(0)
        if outcome is None:
            raise PolicyError("fused macula map missing from stage-two registration")
        fused_h2 = outcome.homography
        fused_in_frame = warp(fused_macula, fused_h2, size, size)

    # disc center: the disc view's native center mapped into the common frame
    disc_idx = bag.indices_of(DISC6)
    disc_center = cfg.default_disc_center
    if disc_idx and disc_idx[0] in h2:
        view = bag.views[disc_idx[0]]
        native = view.probs.shape[0]
        center = common_space_transform(view.scan_kind, native, size).apply(
            [[(native - 1) / 2.0, (native - 1) / 2.0]]
        )
        center = h2[disc_idx[0]].apply(center)
        disc_center = (float(center[0, 0]), float(center[0, 1]))
    try:
        partition = build_partition((size, size), disc_center, cfg.disc_radius, cfg.macula_window)
    except ValueError:
        fallbacks.append("disc center outside canvas, using default placement")
        partition = build_partition(
            (size, size), cfg.default_disc_center, cfg.disc_radius, cfg.macula_window
        )

    combined = fused_in_frame.copy()
    views_per_region: dict[str, list[int]] = {"macula": bag.macula_view_indices()}
    for region, name in ((DISC, "disc"), (OTHER, "other")):
        kinds = policy.kinds_for(region)
        selected_idx = [i for i in stage2_idx if bag.views[i].scan_kind in kinds and i in warped2]
        views_per_region[name] = selected_idx
        if not selected_idx:
            fallbacks.append(f"{name} region kept anchor values (no {'/'.join(kinds)} view)")
            continue
        mask = partition.region_ids == region
        combined = fuse_region(
            [warped2[i] for i in selected_idx], mask, policy.classes_for(region), combined
        )

    # reversion into each view's original coordinates
    macula_idx = bag.macula_view_indices()
    macula_mask = np.zeros((size, size), dtype=bool)
    top = (size - cfg.macula_window) // 2
    macula_mask[top : top + cfg.macula_window, top : top + cfg.macula_window] = True

    labels: dict[int, IntegratedLabel] = {}
    ones = np.ones((size, size), dtype=np.float64)
    for idx, view in enumerate(bag.views):
        if view.scan_kind == AUXILIARY:
            continue
        native = view.probs.shape[0]
        reverted = None
        coverage = None
        if idx in macula_idx:
            pos = macula_idx.index(idx)
            if pos == reg1.anchor_index:
                h1 = Homography.identity()
            else:
                outcome = reg1.outcomes.get(pos)
                if outcome is None:
                    fallbacks.append(f"view {idx} not reverted (stage-one failure)")
                    continue
                h1 = outcome.homography
            # fused frame == stage-two frame composed with the fused map's h2
            full_h1 = fused_h2.compose(h1)
            inv = full_h1.invert()
            rev1 = warp(combined, inv, size, size)
            cov1 = warp(ones, inv, size, size) > 0.5
            if idx in h2:
                inv2 = h2[idx].invert()
                rev2 = warp(combined, inv2, size, size)
                cov2 = warp(ones, inv2, size, size) > 0.5
                # macula-stage inverse inside the macula window, stage-two elsewhere
                in_macula = warp(macula_mask.astype(np.float64), inv, size, size) > 0.5
                reverted = np.where(in_macula[:, :, None], rev1, rev2)
                coverage = np.where(in_macula, cov1, cov2)
            else:
                reverted, coverage = rev1, cov1
        elif idx in h2:
            inv2 = h2[idx].invert()
            reverted = warp(combined, inv2, size, size)
            coverage = warp(ones, inv2, size, size) > 0.5
        else:
            fallbacks.append(f"view {idx} not reverted (stage-two failure)")
            continue

        native_soft = from_common_space(reverted, view.scan_kind, native, size)
        native_cov = from_common_space(coverage.astype(np.float64), view.scan_kind, native, size) > 0.5
        labels[idx] = _overwrite_back_classes(
            np.asarray(view.probs, dtype=np.float64), native_soft, native_cov, policy
        )

    manifest = {
        "regions": list(REGION_NAMES),
        "views_per_region": views_per_region,
        "disc_center": [partition.disc_center[0], partition.disc_center[1]],
        "disc_radius": partition.disc_radius,
        "fallbacks": fallbacks,
        "integrated_views": sorted(labels),
    }
    return labels, manifest


def _overwrite_back_classes(
    original: np.ndarray,
    reverted: np.ndarray,
    coverage: np.ndarray,
    policy: IntegrationPolicy,
) -> IntegratedLabel:
    """Write the back-transformed classes into the original prediction and
    rescale the untouched channels so each pixel still sums to one."""
    back = list(policy.back_transform_classes)
    keep = [c for c in range(original.shape[2]) if c not in back]
    soft = original.copy()
    new_back = np.clip(reverted[:, :, back], 0.0, 1.0)
    new_back_sum = np.clip(new_back.sum(axis=2), 0.0, 1.0)
    old_keep_sum = original[:, :, keep].sum(axis=2)
    remainder = 1.0 - new_back_sum
    scale = np.where(old_keep_sum > 1e-12, remainder / np.maximum(old_keep_sum, 1e-12), 0.0)
    scaled_keep = original[:, :, keep] * scale[:, :, None]
    # untouched channels all zero: the remainder falls to background
    empty = old_keep_sum <= 1e-12
    if empty.any():
        bg_pos = keep.index(cavf.BACKGROUND)
        scaled_keep[empty, bg_pos] = remainder[empty]
    soft[:, :, back] = np.where(coverage[:, :, None], new_back, original[:, :, back])
    soft_keep = np.where(coverage[:, :, None], scaled_keep, original[:, :, keep])
    for pos, c in enumerate(keep):
        soft[:, :, c] = soft_keep[:, :, pos]
    hard = soft.argmax(axis=2)
    return IntegratedLabel(soft=soft, hard=hard)
