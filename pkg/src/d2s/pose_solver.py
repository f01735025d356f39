"""Reliability filtering, P3P-in-RANSAC and Levenberg-Marquardt pose refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateSample, NoConsensus, TooFewCorrespondences
from .geometry import DEPTH_EPS, CameraPose, so3_exp, skew

COLLINEAR_TOL = 1e-9
IMAG_TOL = 1e-9


@dataclass(frozen=True)
class Correspondence:
    pixel: np.ndarray
    world: np.ndarray
    reliability: float = 1.0


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold_px: float = 12.0
    max_iterations: int = 10_000
    confidence: float = 0.9999
    reliability_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class PoseEstimate:
    pose: CameraPose
    inlier_mask: np.ndarray
    inlier_count: int
    iterations_used: int


def filter_reliable(coords, keypoints, threshold=0.5):
    """Correspondences whose reliability is >= ``threshold``, in input order."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    rel = np.asarray(coords.reliability).reshape(-1)
    world = np.asarray(coords.coords, dtype=np.float64)
    px = np.asarray(keypoints, dtype=np.float64)
    return [Correspondence(px[i], world[i], float(rel[i])) for i in np.flatnonzero(rel >= threshold)]


def all_correspondences(coords, keypoints):
    """Every prediction as a correspondence (no reliability filtering)."""
    world = np.asarray(coords.coords, dtype=np.float64)
    px = np.asarray(keypoints, dtype=np.float64)
    rel = np.asarray(coords.reliability).reshape(-1)
    return [Correspondence(px[i], world[i], float(rel[i])) for i in range(len(px))]


def _arrays(correspondences):
    if isinstance(correspondences, tuple):
        return tuple(np.asarray(a, dtype=np.float64) for a in correspondences)
    if not correspondences:
        return np.zeros((0, 2)), np.zeros((0, 3))
    return (np.array([c.pixel for c in correspondences], dtype=np.float64),
            np.array([c.world for c in correspondences], dtype=np.float64))


def bearings(pixels, k):
    rays = np.stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy,
                     np.ones(len(pixels))], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _rigid_fit(world, cam):
    """R, t minimizing sum ||R world + t - cam||^2 (Kabsch)."""
    cw, cc = world.mean(0), cam.mean(0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cc - R @ cw


def _real_roots(coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    scale = np.max(np.abs(coeffs))
    if scale == 0:
        return np.zeros(0)
    roots = np.roots(coeffs / scale)
    real = roots[np.abs(roots.imag) < IMAG_TOL * np.maximum(1.0, np.abs(roots))].real
    poly = np.poly1d(coeffs / scale)
    deriv = poly.deriv()
    polished = []
    for r in real:
        for _ in range(3):
            d = deriv(r)
            if d == 0:
                break
            r = r - poly(r) / d
        polished.append(r)
    return np.array(polished)


def _polish_depths(s, cosines, sq_dists, iters=3):
    """Gauss-Newton on the three law-of-cosines equations in the ray depths."""
    ca, cb, cg = cosines
    a2, b2, c2 = sq_dists
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array([s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
                      s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
                      s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2])
        J = np.array([[0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
                      [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
                      [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0]])
        try:
            step = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            break
        s = s - step
    return s


def p3p(pixels, world, k):
    """All poses consistent with three 2D-3D correspondences (Grunert's quartic).

    Returns a list of up to four :class:`CameraPose`.  Raises
    :class:`DegenerateSample` for collinear/duplicate world points or
    duplicate pixel observations.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(3, 2)
    world = np.asarray(world, dtype=np.float64).reshape(3, 3)
    area = 0.5 * np.linalg.norm(np.cross(world[1] - world[0], world[2] - world[0]))
    if area < COLLINEAR_TOL:
        raise DegenerateSample("world points are collinear or duplicated")
    for i, j in ((0, 1), (0, 2), (1, 2)):
        if np.linalg.norm(pixels[i] - pixels[j]) < COLLINEAR_TOL:
            raise DegenerateSample("duplicate pixel observations")
    j1, j2, j3 = bearings(pixels, k)
    a2 = np.sum((world[1] - world[2]) ** 2)
    b2 = np.sum((world[0] - world[2]) ** 2)
    c2 = np.sum((world[0] - world[1]) ** 2)
    ca, cb, cg = j2 @ j3, j1 @ j3, j1 @ j2

    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca ** 2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
    A2 = 2 * (amc ** 2 - 1 + 2 * amc ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg ** 2

    poses = []
    for v in _real_roots([A4, A3, A2, A1, A0]):
        if v <= 0:
            continue
        denom = 2 * (cg - v * ca)
        if abs(denom) < 1e-14:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / denom
        if u <= 0:
            continue
        s1_sq = b2 / (1 + v * v - 2 * v * cb)
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(s1_sq)
        depths = _polish_depths(np.array([s1, u * s1, v * s1]), (ca, cb, cg), (a2, b2, c2))
        cam = depths[:, None] * np.stack([j1, j2, j3])
        R, t = _rigid_fit(world, cam)
        poses.append(CameraPose(R, t))
    return poses


def reprojection_errors(R, t, pixels, world, k):
    """Pixel error per correspondence; inf where the point is behind the camera."""
    cam = world @ R.T + t
    z = cam[:, 2]
    ok = z > DEPTH_EPS
    zs = np.where(ok, z, 1.0)
    du = k.fx * cam[:, 0] / zs + k.cx - pixels[:, 0]
    dv = k.fy * cam[:, 1] / zs + k.cy - pixels[:, 1]
    err = np.sqrt(du * du + dv * dv)
    return np.where(ok, err, np.inf)


def reprojection_cost(pose, pixels, world, k):
    """Sum of squared pixel residuals (inf if any point is behind the camera)."""
    e = reprojection_errors(pose.rotation, pose.translation, np.asarray(pixels, float),
                            np.asarray(world, float), k)
    return float(np.sum(e * e))


def _residuals_jacobian(R, t, pixels, world, k):
    pr = world @ R.T
    cam = pr + t
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    r = np.stack([k.fx * x / z + k.cx - pixels[:, 0], k.fy * y / z + k.cy - pixels[:, 1]], axis=1)
    n = len(world)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = k.fx / z
    dproj[:, 0, 2] = -k.fx * x / z ** 2
    dproj[:, 1, 1] = k.fy / z
    dproj[:, 1, 2] = -k.fy * y / z ** 2
    dcam = np.zeros((n, 3, 6))
    # left perturbation R <- exp(w) R: d(cam)/dw = -[R y]_x
    dcam[:, :, :3] = -np.stack([skew(p) for p in pr])
    dcam[:, :, 3:] = np.eye(3)
    J = np.einsum("nij,njk->nik", dproj, dcam).reshape(2 * n, 6)
    return r.reshape(-1), J


def refine_lm(pose, pixels, world, k, max_iters=100):
    """Levenberg-Marquardt on total squared reprojection error.

    Parameterized by a tangent-space rotation update and a translation
    update.  Only cost-decreasing steps are accepted, so the returned pose is
    never worse than the input.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    world = np.asarray(world, dtype=np.float64)
    R, t = pose.rotation.copy(), pose.translation.copy()
    cost = reprojection_cost(CameraPose(R, t), pixels, world, k)
    if not math.isfinite(cost):
        return pose
    lam = 1e-3
    for _ in range(max_iters):
        r, J = _residuals_jacobian(R, t, pixels, world, k)
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new = so3_exp(step[:3]) @ R
            t_new = t + step[3:]
            # re-orthonormalize against drift
            U, _, Vt = np.linalg.svd(R_new)
            R_new = U @ Vt
            new_cost = reprojection_cost(CameraPose(R_new, t_new), pixels, world, k)
            if new_cost < cost:
                decrease = cost - new_cost
                R, t, cost = R_new, t_new, new_cost
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved:
            break
        if np.linalg.norm(step) < 1e-10 or decrease < 1e-12:
            break
    return CameraPose(R, t)


def _adaptive_bound(inlier_ratio, confidence, max_iterations):
    w3 = inlier_ratio ** 3
    if w3 >= 1.0:
        return 1
    if w3 <= 0.0:
        return max_iterations
    return min(max_iterations, int(math.ceil(math.log(1 - confidence) / math.log(1 - w3))))


def ransac_pnp(correspondences, k, config=None, refine=True):
    """Hypothesize-and-verify P3P with adaptive termination.

    Scores each candidate by inlier count (ties: lower inlier cost), then
    refits the best hypothesis on its inliers with :func:`refine_lm`.
    """
    config = config or RansacConfig()
    pixels, world = _arrays(correspondences)
    n = len(pixels)
    if n < 4:
        raise TooFewCorrespondences(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(config.seed)
    thr = config.inlier_threshold_px

    best_key, best_pose, best_mask = (0, -math.inf), None, None
    bound = config.max_iterations
    it = 0
    while it < bound:
        it += 1
        sample = rng.choice(n, 3, replace=False)
        try:
            candidates = p3p(pixels[sample], world[sample], k)
        except DegenerateSample:
            continue
        for cand in candidates:
            err = reprojection_errors(cand.rotation, cand.translation, pixels, world, k)
            mask = err < thr
            count = int(mask.sum())
            key = (count, -float(np.sum(err[mask] ** 2)))
            if key > best_key:
                best_key, best_pose, best_mask = key, cand, mask
                bound = _adaptive_bound(count / n, config.confidence, config.max_iterations)

    if best_pose is None or best_key[0] < 4:
        raise NoConsensus(f"best hypothesis has {best_key[0]} inliers")
    pose, mask = best_pose, best_mask
    if refine:
        for _ in range(2):
            pose = refine_lm(pose, pixels[mask], world[mask], k)
            new_mask = reprojection_errors(pose.rotation, pose.translation, pixels, world, k) < thr
            if new_mask.sum() < 4 or np.array_equal(new_mask, mask):
                break
            mask = new_mask
        # start the final fit from whichever pose is cheaper on the final inlier set
        if reprojection_cost(best_pose, pixels[mask], world[mask], k) < \
                reprojection_cost(pose, pixels[mask], world[mask], k):
            pose = best_pose
        pose = refine_lm(pose, pixels[mask], world[mask], k)
    return PoseEstimate(pose, mask, int(mask.sum()), it)
