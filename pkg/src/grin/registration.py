"""Pairwise and subject-level registration of vessel probability maps.

The chain is: vesselness extraction -> Harris keypoints with normalized
patch descriptors -> mutual-nearest matching with a ratio test -> RANSAC
affine (or full homography) fit -> component validation. Subject bags are
registered with a multi-trial loop that picks replacement anchors by
clustering the translation components.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import cavf
from ._kernels import harris_response, pairwise_sqdist
from .geometry import (
    DecomposedTransform,
    Homography,
    SingularTransformError,
    ValidationThresholds,
    decompose,
    validate,
)


class RegistrationError(RuntimeError):
    """A registration stage failed; `stage` names the failing step."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ExhaustedAnchorsError(RuntimeError):
    """No unused anchor candidate remains."""


@dataclass(frozen=True)
class DetectorConfig:
    max_keypoints: int = 400
    nms_radius: int = 5
    harris_k: float = 0.05
    window_radius: int = 2
    rel_threshold: float = 0.005
    patch_size: int = 16
    subpixel: bool = True


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold_px: float = 3.0
    min_inliers: int = 12
    min_correspondences: int = 4
    full_homography: bool = False
    seed: int = 0


@dataclass(frozen=True)
class BagConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: ValidationThresholds = field(default_factory=ValidationThresholds)
    initial_anchor: int = 0
    extra_trial: bool = True
    kmeans_k: int = 2
    kmeans_iters: int = 20
    seed: int = 0


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float
    descriptor: np.ndarray


@dataclass(frozen=True)
class RegistrationOutcome:
    homography: Homography
    decomposition: DecomposedTransform
    inlier_count: int
    inlier_ratio: float
    valid: bool


@dataclass(frozen=True)
class BagRegistration:
    """Result of multi-trial bag registration.

    `outcomes` maps each moving-view index to its outcome relative to
    `anchor_index` (None when estimation failed outright). On failure of
    every anchor, `success` is False and outcomes hold the last trial.
    """

    anchor_index: int
    outcomes: dict[int, RegistrationOutcome | None]
    used_anchors: tuple[int, ...]
    cluster_distance: float
    success: bool
    trials: int


def extract_vesselness(probs: np.ndarray) -> np.ndarray:
    """Sum the capillary, artery and vein channels of a CAVF map."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[2] != cavf.N_CLASSES:
        raise ValueError(
            f"expected an (H,W,{cavf.N_CLASSES}) CAVF map, got shape {probs.shape}"
        )
    vess = probs[:, :, cavf.CAPILLARY] + probs[:, :, cavf.ARTERY] + probs[:, :, cavf.VEIN]
    return np.clip(vess, 0.0, 1.0)


def _nms_peaks(resp: np.ndarray, radius: int, threshold: float) -> np.ndarray:
    """Indices (y, x) of local maxima over a (2r+1)^2 window above threshold."""
    size = 2 * radius + 1
    padded = np.full(
        (resp.shape[0] + size - 1, resp.shape[1] + size - 1), -np.inf, dtype=np.float64
    )
    padded[radius : radius + resp.shape[0], radius : radius + resp.shape[1]] = resp
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    local_max = windows.max(axis=(2, 3))
    peaks = (resp >= local_max) & (resp > threshold)
    ys, xs = np.nonzero(peaks)
    return np.stack([ys, xs], axis=1)


def _subpixel_offset(resp: np.ndarray, y: int, x: int) -> tuple[float, float]:
    h, w = resp.shape
    dx = dy = 0.0
    if 0 < x < w - 1:
        denom = resp[y, x - 1] - 2.0 * resp[y, x] + resp[y, x + 1]
        if abs(denom) > 1e-12:
            dx = 0.5 * (resp[y, x - 1] - resp[y, x + 1]) / denom
    if 0 < y < h - 1:
        denom = resp[y - 1, x] - 2.0 * resp[y, x] + resp[y + 1, x]
        if abs(denom) > 1e-12:
            dy = 0.5 * (resp[y - 1, x] - resp[y + 1, x]) / denom
    return float(np.clip(dx, -0.5, 0.5)), float(np.clip(dy, -0.5, 0.5))


def detect_keypoints(vesselness: np.ndarray, cfg: DetectorConfig | None = None) -> list[Keypoint]:
    """Harris corners on a vesselness map with normalized patch descriptors.

    Keypoints whose descriptor patch would leave the image, or whose patch is
    flat (zero norm), are dropped.
    """
    cfg = cfg or DetectorConfig()
    v = np.asarray(vesselness, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("vesselness map must be 2-D")
    if v.shape[0] < 32 or v.shape[1] < 32:
        raise ValueError(f"image too small for detection: {v.shape}")

    resp = harris_response(v, cfg.harris_k, cfg.window_radius)
    max_resp = resp.max()
    if max_resp <= 0.0:
        return []
    peaks = _nms_peaks(resp, cfg.nms_radius, cfg.rel_threshold * max_resp)
    if peaks.size == 0:
        return []

    # strongest first, deterministic tie-break by position
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -resp[peaks[:, 0], peaks[:, 1]]))
    peaks = peaks[order]

    half = cfg.patch_size // 2
    keypoints: list[Keypoint] = []
    for y, x in peaks:
        if len(keypoints) >= cfg.max_keypoints:
            break
        y0, x0 = y - half, x - half
        y1, x1 = y0 + cfg.patch_size, x0 + cfg.patch_size
        if y0 < 0 or x0 < 0 or y1 > v.shape[0] or x1 > v.shape[1]:
            continue
        patch = v[y0:y1, x0:x1].ravel().copy()
        patch -= patch.mean()
        norm = np.linalg.norm(patch)
        if norm < 1e-9:
            continue
        patch /= norm
        dx, dy = _subpixel_offset(resp, y, x) if cfg.subpixel else (0.0, 0.0)
        keypoints.append(
            Keypoint(x=float(x + dx), y=float(y + dy), response=float(resp[y, x]), descriptor=patch)
        )
    return keypoints


def match_descriptors(
    a: list[Keypoint], b: list[Keypoint], ratio: float = 0.8
) -> list[tuple[int, int]]:
    """Mutual nearest neighbours passing Lowe's ratio test.

    A pair (i, j) is kept when j is i's nearest descriptor in b, i is j's
    nearest in a, and d1 < ratio * d2 for i's two nearest distances.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must lie in (0, 1]")
    if not a or not b:
        return []
    da = np.stack([k.descriptor for k in a])
    db = np.stack([k.descriptor for k in b])
    d2 = pairwise_sqdist(da, db)
    nearest_b = d2.argmin(axis=1)
    nearest_a = d2.argmin(axis=0)
    matches = []
    for i, j in enumerate(nearest_b):
        if nearest_a[j] != i:
            continue
        d1 = np.sqrt(d2[i, j])
        if d2.shape[1] > 1:
            row = d2[i].copy()
            row[j] = np.inf
            d_second = np.sqrt(row.min())
        else:
            d_second = np.inf
        if d1 < ratio * d_second:
            matches.append((i, int(j)))
    return matches


def correspondence_points(
    a: list[Keypoint], b: list[Keypoint], matches: list[tuple[int, int]]
) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([[a[i].x, a[i].y] for i, _ in matches], dtype=np.float64).reshape(-1, 2)
    dst = np.array([[b[j].x, b[j].y] for _, j in matches], dtype=np.float64).reshape(-1, 2)
    return src, dst


def _fit_affine_lstsq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    m = np.column_stack([src, np.ones(len(src))])
    coef, *_ = np.linalg.lstsq(m, dst, rcond=None)
    h = np.eye(3)
    h[0, :] = coef[:, 0]
    h[1, :] = coef[:, 1]
    return h


def _fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    def normalizer(pts):
        c = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1.0]])
        return t

    ts, td = normalizer(src), normalizer(dst)
    sn = (np.column_stack([src, np.ones(len(src))]) @ ts.T)[:, :2]
    dn = (np.column_stack([dst, np.ones(len(dst))]) @ td.T)[:, :2]
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.array(rows))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return h / h[2, 2]


def _affine_candidates(src, dst, samples):
    """Solve the 3-point affine system for every sample; NaN rows for
    degenerate (collinear) samples."""
    pts = src[samples]  # (iters, 3, 2)
    m = np.concatenate([pts, np.ones((*pts.shape[:2], 1))], axis=2)  # (iters, 3, 3)
    det = np.linalg.det(m)
    good = np.abs(det) > 1e-9
    out = np.full((len(samples), 3, 2), np.nan)
    if good.any():
        rhs = dst[samples][good]
        out[good] = np.linalg.solve(m[good], rhs)
    return out  # coefficient columns for x' and y'


def estimate_transform(
    src: np.ndarray,
    dst: np.ndarray,
    cfg: RansacConfig | None = None,
    thresholds: ValidationThresholds | None = None,
) -> RegistrationOutcome:
    """RANSAC fit of dst ~ h(src) with an inlier least-squares refit.

    Raises RegistrationError when there are fewer than min_correspondences
    matches or no candidate reaches min_inliers support.
    """
    cfg = cfg or RansacConfig()
    thresholds = thresholds or ValidationThresholds()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < cfg.min_correspondences:
        raise RegistrationError(
            "estimate", f"{n} correspondences, need at least {cfg.min_correspondences}"
        )

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    sample_size = 4 if cfg.full_homography else 3
    samples = np.array(
        [rng.choice(n, size=sample_size, replace=False) for _ in range(cfg.iterations)]
    )

    thresh2 = cfg.inlier_threshold_px**2
    if cfg.full_homography:
        errors = np.full((cfg.iterations, n), np.inf)
        src_h = np.column_stack([src, np.ones(n)])
        for it in range(cfg.iterations):
            pts = src[samples[it]]
            if abs(np.linalg.det(np.column_stack([pts[:3], np.ones(3)]))) < 1e-9:
                continue
            try:
                h = _fit_homography_dlt(src[samples[it]], dst[samples[it]])
            except np.linalg.LinAlgError:
                continue
            proj = src_h @ h.T
            denom = proj[:, 2]
            ok = np.abs(denom) > 1e-12
            e = np.full(n, np.inf)
            e[ok] = np.sum((proj[ok, :2] / denom[ok, None] - dst[ok]) ** 2, axis=1)
            errors[it] = e
    else:
        coefs = _affine_candidates(src, dst, samples)  # (iters, 3, 2)
        src_h = np.column_stack([src, np.ones(n)])  # (n, 3)
        proj = np.einsum("nk,ikc->inc", src_h, coefs)  # (iters, n, 2)
        errors = np.sum((proj - dst[None]) ** 2, axis=2)
        errors = np.where(np.isnan(errors), np.inf, errors)

    inlier_mask = errors <= thresh2
    counts = inlier_mask.sum(axis=1)
    best_count = counts.max()
    if best_count < max(cfg.min_inliers, sample_size):
        raise RegistrationError(
            "estimate", f"best consensus has {best_count} inliers, need {cfg.min_inliers}"
        )
    # tie-break: most inliers, then smallest inlier error sum, then first
    candidates = np.flatnonzero(counts == best_count)
    err_sums = np.where(inlier_mask[candidates], errors[candidates], 0.0).sum(axis=1)
    best_it = candidates[np.argmin(err_sums)]
    inliers = inlier_mask[best_it]

    fit = _fit_homography_dlt if cfg.full_homography else _fit_affine_lstsq
    try:
        h_mat = fit(src[inliers], dst[inliers])
        h = Homography.from_matrix(h_mat)
    except (np.linalg.LinAlgError, SingularTransformError) as exc:
        raise RegistrationError("estimate", f"refit failed: {exc}") from exc

    proj = h.apply(src)
    final_err2 = np.sum((proj - dst) ** 2, axis=1)
    final_inliers = int((final_err2 <= thresh2).sum())
    d = decompose(h)
    result = validate(d, thresholds)
    return RegistrationOutcome(
        homography=h,
        decomposition=d,
        inlier_count=final_inliers,
        inlier_ratio=final_inliers / n,
        valid=result.valid,
    )


def register_pair(
    moving: np.ndarray,
    anchor: np.ndarray,
    cfg: BagConfig | None = None,
    ratio: float = 0.8,
) -> RegistrationOutcome:
    """Full detect -> match -> estimate -> validate chain for one pair.

    Returns the transform mapping moving coordinates into anchor coordinates.
    """
    cfg = cfg or BagConfig()
    kps_m = detect_keypoints(moving, cfg.detector)
    kps_a = detect_keypoints(anchor, cfg.detector)
    if not kps_m or not kps_a:
        raise RegistrationError("detect", "no keypoints detected")
    matches = match_descriptors(kps_m, kps_a, ratio)
    if len(matches) < cfg.ransac.min_correspondences:
        raise RegistrationError("match", f"only {len(matches)} correspondences")
    src, dst = correspondence_points(kps_m, kps_a, matches)
    return estimate_transform(src, dst, cfg.ransac, cfg.thresholds)


def _kmeans(points: np.ndarray, k: int, iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic Lloyd k-means with farthest-point initialization.

    Returns (assignments, centroids).
    """
    n = len(points)
    k = min(k, n)
    centers = np.empty((k, 2))
    d0 = np.linalg.norm(points - points.mean(axis=0), axis=1)
    centers[0] = points[int(np.argmax(d0))]
    for c in range(1, k):
        dmin = np.min(
            np.linalg.norm(points[:, None, :] - centers[None, :c, :], axis=2), axis=1
        )
        centers[c] = points[int(np.argmax(dmin))]
    assign = np.zeros(n, dtype=int)
    for _ in range(iters):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_assign = dists.argmin(axis=1)
        for c in range(k):
            members = points[new_assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign, centers


def select_next_anchor(
    translations: np.ndarray,
    used: set[int],
    k: int = 2,
    iters: int = 20,
) -> int:
    """Pick the unused index whose translation is closest to the dominant
    translation cluster.

    Clustering is k-means (k=1 for fewer than 3 points); the dominant
    centroid is the one with the most members, ties broken toward smaller
    within-cluster variance, then lower cluster index. Equal distances break
    toward the lowest index.
    """
    translations = np.asarray(translations, dtype=np.float64).reshape(-1, 2)
    candidates = [i for i in range(len(translations)) if i not in used]
    if not candidates:
        raise ExhaustedAnchorsError("all anchor candidates already used")
    n = len(translations)
    assign, centers = _kmeans(translations, 1 if n < 3 else k, iters)
    counts = np.bincount(assign, minlength=len(centers))
    best = None
    for c in range(len(centers)):
        if counts[c] == 0:
            continue
        members = translations[assign == c]
        var = float(np.mean(np.sum((members - centers[c]) ** 2, axis=1)))
        key = (-counts[c], var, c)
        if best is None or key < best[0]:
            best = (key, c)
    dominant = centers[best[1]]
    dists = np.linalg.norm(translations[candidates] - dominant, axis=1)
    return candidates[int(np.argmin(dists))]


def _trial(
    keypoints: list[list[Keypoint]],
    anchor: int,
    cfg: BagConfig,
    ratio: float,
) -> dict[int, RegistrationOutcome | None]:
    outcomes: dict[int, RegistrationOutcome | None] = {}
    for j in range(len(keypoints)):
        if j == anchor:
            continue
        try:
            if not keypoints[j] or not keypoints[anchor]:
                raise RegistrationError("detect", "no keypoints")
            matches = match_descriptors(keypoints[j], keypoints[anchor], ratio)
            if len(matches) < cfg.ransac.min_correspondences:
                raise RegistrationError("match", f"only {len(matches)} correspondences")
            src, dst = correspondence_points(keypoints[j], keypoints[anchor], matches)
            pair_cfg = replace(cfg.ransac, seed=cfg.ransac.seed + 7919 * anchor + j)
            outcomes[j] = estimate_transform(src, dst, pair_cfg, cfg.thresholds)
        except RegistrationError:
            outcomes[j] = None
    return outcomes


def _trial_translations(outcomes: dict[int, RegistrationOutcome | None]):
    idx = [j for j, o in outcomes.items() if o is not None]
    t = np.array(
        [[outcomes[j].decomposition.tx, outcomes[j].decomposition.ty] for j in idx]
    ).reshape(-1, 2)
    return idx, t


def _cluster_distance(outcomes, cfg: BagConfig) -> float:
    """Distance from the anchor (translation zero) to the dominant
    translation centroid of a successful configuration."""
    _, t = _trial_translations(outcomes)
    if len(t) == 0:
        return float("nan")
    assign, centers = _kmeans(t, 1 if len(t) < 3 else cfg.kmeans_k, cfg.kmeans_iters)
    counts = np.bincount(assign, minlength=len(centers))
    best = None
    for c in range(len(centers)):
        if counts[c] == 0:
            continue
        members = t[assign == c]
        var = float(np.mean(np.sum((members - centers[c]) ** 2, axis=1)))
        key = (-counts[c], var, c)
        if best is None or key < best[0]:
            best = (key, c)
    return float(np.linalg.norm(centers[best[1]]))


def register_bag(
    vesselness_maps: list[np.ndarray],
    cfg: BagConfig | None = None,
    ratio: float = 0.8,
) -> BagRegistration:
    """Register every view of a bag to an adaptively chosen anchor.

    Retries with a new anchor (picked by translation clustering) whenever any
    pairing is invalid; on success optionally runs one extra trial with the
    second-nearest anchor and keeps the configuration with the smaller
    cluster-center distance. Exhausting all anchors yields a failed
    BagRegistration rather than an exception.
    """
    cfg = cfg or BagConfig()
    n = len(vesselness_maps)
    if n < 2:
        raise ValueError("a bag needs at least two views")

    keypoints = [detect_keypoints(v, cfg.detector) for v in vesselness_maps]
    used: list[int] = []
    anchor = cfg.initial_anchor
    last_outcomes: dict[int, RegistrationOutcome | None] = {}

    while True:
        used.append(anchor)
        outcomes = _trial(keypoints, anchor, cfg, ratio)
        last_outcomes = outcomes
        if all(o is not None and o.valid for o in outcomes.values()):
            break
        idx, translations = _trial_translations(outcomes)
        next_anchor = None
        if len(translations):
            try:
                pos = select_next_anchor(
                    translations,
                    {i for i, j in enumerate(idx) if j in used},
                    cfg.kmeans_k,
                    cfg.kmeans_iters,
                )
                next_anchor = idx[pos]
            except ExhaustedAnchorsError:
                next_anchor = None
        if next_anchor is None:
            remaining = [j for j in range(n) if j not in used]
            next_anchor = remaining[0] if remaining else None
        if next_anchor is None:
            return BagRegistration(
                anchor_index=anchor,
                outcomes=last_outcomes,
                used_anchors=tuple(used),
                cluster_distance=float("nan"),
                success=False,
                trials=len(used),
            )
        anchor = next_anchor

    first = BagRegistration(
        anchor_index=anchor,
        outcomes=last_outcomes,
        used_anchors=tuple(used),
        cluster_distance=_cluster_distance(last_outcomes, cfg),
        success=True,
        trials=len(used),
    )
    if not cfg.extra_trial:
        return first

    # one extra trial with the second-nearest unused anchor
    idx, translations = _trial_translations(last_outcomes)
    if len(translations) < 2:
        return first
    assign, centers = _kmeans(
        translations, 1 if len(translations) < 3 else cfg.kmeans_k, cfg.kmeans_iters
    )
    counts = np.bincount(assign, minlength=len(centers))
    dominant = centers[int(np.argmax(counts))]
    order = np.argsort(np.linalg.norm(translations - dominant, axis=1), kind="stable")
    ranked = [idx[i] for i in order if idx[i] not in used]
    if len(ranked) < 2:
        return first
    alt_anchor = ranked[1]
    alt_outcomes = _trial(keypoints, alt_anchor, cfg, ratio)
    trials = first.trials + 1
    used_all = tuple(list(first.used_anchors) + [alt_anchor])
    if all(o is not None and o.valid for o in alt_outcomes.values()):
        alt_dist = _cluster_distance(alt_outcomes, cfg)
        if alt_dist < first.cluster_distance:
            return BagRegistration(
                anchor_index=alt_anchor,
                outcomes=alt_outcomes,
                used_anchors=used_all,
                cluster_distance=alt_dist,
                success=True,
                trials=trials,
            )
    return replace(first, used_anchors=used_all, trials=trials)


def manifest_dict(bag: BagRegistration) -> dict:
    """JSON-ready registration manifest for one subject."""
    views = {}
    for j, o in sorted(bag.outcomes.items()):
        if o is None:
            views[str(j)] = {"registered": False}
        else:
            views[str(j)] = {
                "registered": True,
                "homography_hex": o.homography.to_bytes().hex(),
                "decomposition": o.decomposition.as_dict(),
                "inlier_count": o.inlier_count,
                "inlier_ratio": o.inlier_ratio,
                "valid": o.valid,
            }
    return {
        "anchor_index": bag.anchor_index,
        "success": bag.success,
        "used_anchors": list(bag.used_anchors),
        "cluster_distance": bag.cluster_distance,
        "trials": bag.trials,
        "views": views,
    }
