"""Evaluation: multi-instance match consistency, pose and homography recovery.

Both robust estimators are seeded numpy RANSAC loops with fixed iteration
counts so identical inputs always produce identical outputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import FineMatchSet, InstanceMaskPair

POSE_THRESHOLDS_DEG = (5.0, 10.0, 20.0)
HOMOGRAPHY_THRESHOLDS_PX = (3.0, 5.0, 10.0)
RANSAC_ITERS = 500


class EstimationError(RuntimeError):
    """Robust model estimation failed (too few matches or degenerate data)."""


# ---------------------------------------------------------------------------
# Threshold curves


def auc(errors, threshold: float) -> float:
    """Exact area under the cumulative recall curve on [0, threshold].

    Each error contributes a step of height 1/N at its value; non-finite
    errors (failed pairs) stay in the denominator and never contribute area.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    n = errors.size
    if n == 0:
        return 0.0
    # Sorting first makes the float sum independent of input order.
    reached = np.sort(errors[np.isfinite(errors) & (errors <= threshold)])
    return float((threshold - reached).sum() / (n * threshold))


@dataclass
class ErrorCurve:
    """Per-pair errors plus the AUC values used for reporting."""

    errors: np.ndarray
    thresholds: tuple[float, ...]

    def __post_init__(self):
        self.errors = np.sort(np.asarray(self.errors, dtype=np.float64))
        if self.errors.size and self.errors[0] < 0:
            raise ValueError("errors must be >= 0")
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ValueError("thresholds must be strictly increasing")

    def aucs(self) -> dict[str, float]:
        return {f"auc@{t:g}": auc(self.errors, t) for t in self.thresholds}


# ---------------------------------------------------------------------------
# Multi-instance matching consistency


@dataclass
class ImimReport:
    """Share of source-instance matches that stay on the target instance."""

    value: float
    n_source: int
    n_consistent: int
    valid: bool

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "n_source": self.n_source,
            "n_consistent": self.n_consistent,
            "valid": self.valid,
        }


def _round_px(v: np.ndarray) -> np.ndarray:
    # Half-up rounding keeps x.5 boundaries deterministic across platforms.
    return np.floor(v + 0.5).astype(np.int64)


def _in_mask(mask: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    px = _round_px(xs)
    py = _round_px(ys)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    out = np.zeros(xs.shape, dtype=bool)
    out[inside] = mask[py[inside], px[inside]]
    return out


def imim_score(matches: FineMatchSet, instance: InstanceMaskPair) -> ImimReport:
    """100 * M / N: N matches start on the source mask, M of them land on target."""
    src = _in_mask(instance.source_mask, matches.xa, matches.ya)
    n = int(src.sum())
    if n == 0:
        return ImimReport(value=0.0, n_source=0, n_consistent=0, valid=False)
    tgt = _in_mask(instance.target_mask, matches.xb, matches.yb)
    m = int((src & tgt).sum())
    return ImimReport(value=100.0 * m / n, n_source=n, n_consistent=m, valid=True)


def aggregate_imim(reports: list[ImimReport]) -> dict:
    """Mean-of-ratios over valid instances plus the pooled ratio-of-sums."""
    valid = [r for r in reports if r.valid]
    total_n = sum(r.n_source for r in valid)
    total_m = sum(r.n_consistent for r in valid)
    return {
        "mean_of_ratios": float(np.mean([r.value for r in valid])) if valid else 0.0,
        "ratio_of_sums": 100.0 * total_m / total_n if total_n else 0.0,
        "n_valid": len(valid),
        "n_invalid": len(reports) - len(valid),
    }


# ---------------------------------------------------------------------------
# Pose error and essential-matrix RANSAC


def pose_error(
    R_est: np.ndarray, t_est: np.ndarray, R_gt: np.ndarray, t_gt: np.ndarray
) -> float:
    """Max of rotation angle error and translation direction error, degrees.

    Translation direction is compared up to sign; a zero ground-truth or
    estimated translation makes the direction undefined, in which case the
    translation term is 0 and a warning is emitted.
    """
    R_est = np.asarray(R_est, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    t_est = np.asarray(t_est, dtype=np.float64).reshape(3)
    t_gt = np.asarray(t_gt, dtype=np.float64).reshape(3)
    cos_r = np.clip((np.trace(R_est.T @ R_gt) - 1.0) / 2.0, -1.0, 1.0)
    e_r = np.degrees(np.arccos(cos_r))
    n_est, n_gt = np.linalg.norm(t_est), np.linalg.norm(t_gt)
    if n_est < 1e-12 or n_gt < 1e-12:
        warnings.warn("pose_error: zero translation, direction term set to 0", stacklevel=2)
        e_t = 0.0
    else:
        u, v = t_est / n_est, t_gt / n_gt
        # atan2 form is exact at 0 for (anti-)parallel vectors and accurate
        # for small angles where arccos loses precision
        e_t = np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), abs(u @ v)))
    return float(max(e_r, e_t))


def _normalize_points(x: np.ndarray, y: np.ndarray, K: np.ndarray) -> np.ndarray:
    pts = np.stack([x, y, np.ones_like(x)], axis=1)
    return pts @ np.linalg.inv(K).T


def _essential_from_pts(
    na: np.ndarray, nb: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    a = na[:, :2] / na[:, 2:3]
    b = nb[:, :2] / nb[:, 2:3]
    rows = np.column_stack(
        [
            b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0],
            b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1],
            a[:, 0], a[:, 1], np.ones(len(a)),
        ]
    )
    if weights is not None:
        rows = rows * np.sqrt(weights)[:, None]
    _, _, vt = np.linalg.svd(rows)
    e = vt[-1].reshape(3, 3)
    u, _, vt2 = np.linalg.svd(e)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt2


def _sampson(E: np.ndarray, na: np.ndarray, nb: np.ndarray) -> np.ndarray:
    Ea = na @ E.T  # rows: E @ a_i
    Etb = nb @ E  # rows: E^T @ b_i
    num = np.einsum("ij,ij->i", nb, Ea) ** 2
    den = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = num / den
    err[~np.isfinite(err)] = np.inf
    return err


def _triangulate(na: np.ndarray, nb: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linear triangulation with camera A at the origin; returns points in A."""
    P_b = np.hstack([R, t.reshape(3, 1)])
    out = np.zeros((len(na), 3))
    for k in range(len(na)):
        ax, ay = na[k, 0] / na[k, 2], na[k, 1] / na[k, 2]
        bx, by = nb[k, 0] / nb[k, 2], nb[k, 1] / nb[k, 2]
        A = np.stack(
            [
                np.array([-1.0, 0.0, ax, 0.0]),
                np.array([0.0, -1.0, ay, 0.0]),
                bx * P_b[2] - P_b[0],
                by * P_b[2] - P_b[1],
            ]
        )
        _, _, vt = np.linalg.svd(A)
        X = vt[-1]
        out[k] = X[:3] / X[3] if abs(X[3]) > 1e-12 else np.inf
    return out


def _choose_pose(E: np.ndarray, na: np.ndarray, nb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    best, best_front = None, -1
    for R in (u @ W @ vt, u @ W.T @ vt):
        for tc in (t, -t):
            X = _triangulate(na, nb, R, tc)
            za = X[:, 2]
            zb = (X @ R.T + tc)[:, 2]
            front = int(np.sum((za > 0) & (zb > 0) & np.isfinite(za)))
            if front > best_front:
                best_front = front
                best = (R, tc)
    R, t = best
    return R, t / np.linalg.norm(t)


def estimate_pose(
    matches: FineMatchSet,
    K_a: np.ndarray,
    K_b: np.ndarray,
    ransac_px: float = 0.5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Essential-matrix RANSAC returning (R, unit t, inlier mask).

    Raises EstimationError below the 8-match minimum or when every sample is
    degenerate.
    """
    n = len(matches)
    if n < 8:
        raise EstimationError(f"need at least 8 matches, got {n}")
    K_a = np.asarray(K_a, dtype=np.float64)
    K_b = np.asarray(K_b, dtype=np.float64)
    na = _normalize_points(matches.xa, matches.ya, K_a)
    nb = _normalize_points(matches.xb, matches.yb, K_b)
    mean_focal = (K_a[0, 0] + K_a[1, 1] + K_b[0, 0] + K_b[1, 1]) / 4.0
    thresh = (ransac_px / mean_focal) ** 2

    rng = np.random.default_rng(seed)
    best_E, best_score = None, np.inf
    for _ in range(RANSAC_ITERS):
        pick = rng.choice(n, size=8, replace=False)
        try:
            E = _essential_from_pts(na[pick], nb[pick])
        except np.linalg.LinAlgError:
            continue
        resid = _sampson(E, na, nb)
        score = float(np.minimum(resid, thresh).sum())
        if int((resid < thresh).sum()) >= 8 and score < best_score:
            best_E, best_score = E, score
    if best_E is None:
        raise EstimationError("no sample produced 8 inliers")
    # Outliers that land near a true epipolar line slip through a count-only
    # gate and skew plain least-squares, so models compete on truncated
    # residual sum and an IRLS refit is kept only when it lowers that cost.
    E = best_E
    final_mask = _sampson(E, na, nb) < thresh
    for _ in range(4):
        resid = _sampson(E, na[final_mask], nb[final_mask])
        w = 1.0 / (resid + thresh * 1e-3)
        try:
            E_new = _essential_from_pts(na[final_mask], nb[final_mask], weights=w)
        except np.linalg.LinAlgError:
            break
        resid_new = _sampson(E_new, na, nb)
        score_new = float(np.minimum(resid_new, thresh).sum())
        if score_new >= best_score or int((resid_new < thresh).sum()) < 8:
            break
        best_score = score_new
        E, final_mask = E_new, resid_new < thresh
    R, t = _choose_pose(E, na[final_mask], nb[final_mask])
    return R, t, final_mask


# ---------------------------------------------------------------------------
# Homography RANSAC and corner error


def _dlt_homography(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Normalized DLT from >= 4 point pairs, rows (x, y)."""

    def norm_transform(p):
        c = p.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-12)
        T = np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1.0]])
        return T

    Ta, Tb = norm_transform(pa), norm_transform(pb)
    ha = np.column_stack([pa, np.ones(len(pa))]) @ Ta.T
    hb = np.column_stack([pb, np.ones(len(pb))]) @ Tb.T
    rows = []
    for (x, y, _), (u, v, _) in zip(ha, hb):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ H @ Ta
    if abs(H[2, 2]) < 1e-12:
        raise np.linalg.LinAlgError("degenerate homography")
    return H / H[2, 2]


def _refine_homography(H: np.ndarray, pa: np.ndarray, pb: np.ndarray, iters: int = 10) -> np.ndarray:
    """Damped Gauss-Newton on forward transfer error; H[2,2] pinned to 1."""
    h = (H / H[2, 2]).ravel()[:8].copy()
    x, y = pa[:, 0], pa[:, 1]

    def residual(hv):
        w = hv[6] * x + hv[7] * y + 1.0
        u = (hv[0] * x + hv[1] * y + hv[2]) / w
        v = (hv[3] * x + hv[4] * y + hv[5]) / w
        return np.concatenate([u - pb[:, 0], v - pb[:, 1]]), u, v, w

    r, u, v, w = residual(h)
    cost = float(r @ r)
    if not np.isfinite(cost):
        return H
    lam = 1e-6
    zero, one = np.zeros_like(x), np.ones_like(x)
    for _ in range(iters):
        ju = np.column_stack([x / w, y / w, one / w, zero, zero, zero, -u * x / w, -u * y / w])
        jv = np.column_stack([zero, zero, zero, x / w, y / w, one / w, -v * x / w, -v * y / w])
        jac = np.vstack([ju, jv])
        grad = jac.T @ r
        while lam <= 1e2:
            try:
                step = np.linalg.solve(jac.T @ jac + lam * np.eye(8), grad)
            except np.linalg.LinAlgError:
                return np.append(h, 1.0).reshape(3, 3)
            cand = h - step
            r_new, u_new, v_new, w_new = residual(cand)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                h, r, u, v, w, cost = cand, r_new, u_new, v_new, w_new, cost_new
                lam = max(lam / 10.0, 1e-9)
                break
            lam *= 10.0
        else:
            break
    return np.append(h, 1.0).reshape(3, 3)


def _transfer_error(H: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    proj = np.column_stack([pa, np.ones(len(pa))]) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = proj[:, :2] / proj[:, 2:3]
    err = np.linalg.norm(proj - pb, axis=1)
    err[~np.isfinite(err)] = np.inf
    return err


def estimate_homography(
    matches: FineMatchSet, ransac_px: float = 3.0, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """4-point RANSAC + inlier refit; forward transfer error in pixels."""
    n = len(matches)
    if n < 4:
        raise EstimationError(f"need at least 4 matches, got {n}")
    pa = np.stack([matches.xa, matches.ya], axis=1)
    pb = np.stack([matches.xb, matches.yb], axis=1)
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for _ in range(RANSAC_ITERS):
        pick = rng.choice(n, size=4, replace=False)
        try:
            H = _dlt_homography(pa[pick], pb[pick])
        except np.linalg.LinAlgError:
            continue
        mask = _transfer_error(H, pa, pb) < ransac_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < 4:
        raise EstimationError(f"no model with 4 inliers ({best_count} best)")
    H = _dlt_homography(pa[best_mask], pb[best_mask])
    final_mask = _transfer_error(H, pa, pb) < ransac_px
    if final_mask.sum() < 4:
        final_mask = best_mask
        H = _dlt_homography(pa[final_mask], pb[final_mask])
    H = _refine_homography(H, pa[final_mask], pb[final_mask])
    refined_mask = _transfer_error(H, pa, pb) < ransac_px
    if refined_mask.sum() >= 4:
        final_mask = refined_mask
        H = _refine_homography(H, pa[final_mask], pb[final_mask])
    return H, final_mask


def corner_error(h_est: np.ndarray, h_gt: np.ndarray, dims: tuple[int, int]) -> float:
    """Mean reprojection distance of the four image corners, pixels."""
    h, w = dims
    corners = np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]]
    )
    ones = np.ones((4, 1))
    pe = np.hstack([corners, ones]) @ np.asarray(h_est, dtype=np.float64).T
    pg = np.hstack([corners, ones]) @ np.asarray(h_gt, dtype=np.float64).T
    pe = pe[:, :2] / pe[:, 2:3]
    pg = pg[:, :2] / pg[:, 2:3]
    return float(np.linalg.norm(pe - pg, axis=1).mean())
