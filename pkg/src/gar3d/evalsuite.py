"""Trajectory, depth and point-cloud metrics with Sim(3) / median / no alignment."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentError, ContractError
from .geometry import CameraPose, geodesic_rot_distance, relative_pose, surface_normals

ALIGN_MODES = ("sim3", "median", "none")
BRUTE_FORCE_LIMIT = 10_000
DELTA_THRESHOLD = 1.25


@dataclass(frozen=True)
class Sim3:
    """``x -> scale * R @ x + t``."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(1.0, np.eye(3), np.zeros(3))

    def apply(self, X) -> np.ndarray:
        return self.scale * np.asarray(X) @ self.R.T + self.t

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        """Move a world-to-camera pose into the aligned world, keeping metric units of the target."""
        c = self.apply(pose.center())
        Rn = pose.R @ self.R.T
        return CameraPose(Rn, -Rn @ c)


def align_sim3(pred, gt, min_spread: float = 1e-9) -> Sim3:
    """Least-squares similarity taking ``pred`` points onto ``gt`` points.

    Closed form: remove centroids, SVD of the cross covariance, reflection
    guard, scale from the correlated variance over the source variance.

    Raises:
        AlignmentError: fewer than 3 points, or points (nearly) collinear.
    """
    P = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if P.shape != G.shape:
        raise ContractError(f"point sets differ in size: {P.shape} vs {G.shape}")
    if len(P) < 3:
        raise AlignmentError(f"Sim(3) alignment needs >= 3 points, got {len(P)}")
    mp, mg = P.mean(0), G.mean(0)
    Pc, Gc = P - mp, G - mg
    for name, X in (("pred", Pc), ("gt", Gc)):
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[0] <= 0 or sv[1] < min_spread * max(sv[0], 1.0):
            raise AlignmentError(f"{name} points are collinear or coincident; Sim(3) is undetermined")
    cov = Gc.T @ Pc / len(P)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_p = np.mean(np.sum(Pc * Pc, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_p)
    return Sim3(s, R, mg - s * R @ mp)


def align_median(pred_depth, gt_depth, valid=None) -> float:
    """Scale ``median(gt) / median(pred)`` over jointly valid pixels."""
    p = np.asarray(pred_depth, dtype=np.float64)
    g = np.asarray(gt_depth, dtype=np.float64)
    m = (g > 0) & (p > 0) & np.isfinite(p) & np.isfinite(g)
    if valid is not None:
        m &= np.asarray(valid, bool)
    if not m.any():
        raise AlignmentError("median alignment needs at least one valid pixel")
    return float(np.median(g[m]) / np.median(p[m]))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------
def _centers(traj) -> np.ndarray:
    return np.stack([p.center() for p in traj])


def canonicalize(traj: list, anchor: int = 0) -> list:
    """Re-express world-to-camera poses so that frame ``anchor`` is the world."""
    inv = traj[anchor].inverse()
    return [p.compose(inv) for p in traj]


def trajectory_metrics(pred_traj: list, gt_traj: list, aligned="sim3"):
    """(ATE, RPE translation, RPE rotation in degrees).

    Args:
        pred_traj, gt_traj: lists of world-to-camera :class:`CameraPose`.
        aligned: ``"sim3"`` to fit a similarity on camera centres, ``"none"``
            to compare as given, or an explicit :class:`Sim3`.

    RPE is averaged over consecutive pairs.
    """
    if len(pred_traj) != len(gt_traj):
        raise ContractError(f"trajectory lengths differ: {len(pred_traj)} vs {len(gt_traj)}")
    if len(pred_traj) < 2:
        raise ContractError("trajectory metrics need at least 2 poses")
    if isinstance(aligned, Sim3):
        sim = aligned
    elif aligned == "sim3":
        sim = align_sim3(_centers(pred_traj), _centers(gt_traj))
    elif aligned in ("none", None):
        sim = Sim3.identity()
    else:
        raise ContractError(f"unknown alignment {aligned!r}")
    pred = [sim.apply_pose(p) for p in pred_traj]
    res = _centers(pred) - _centers(gt_traj)
    ate = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    tra, rot = [], []
    for i in range(len(pred) - 1):
        # camera i+1 expressed in camera i, for both trajectories
        rp = relative_pose(pred[i], pred[i + 1])
        rg = relative_pose(gt_traj[i], gt_traj[i + 1])
        err = rg.inverse().compose(rp)
        tra.append(np.linalg.norm(err.T))
        rot.append(np.degrees(geodesic_rot_distance(rp.R, rg.R)))
    return ate, float(np.mean(tra)), float(np.mean(rot))


# ---------------------------------------------------------------------------
# Depth and point clouds
# ---------------------------------------------------------------------------
def depth_metrics(pred, gt, valid=None):
    """(AbsRel, RMSE, delta < 1.25) over pixels valid in both maps."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    m = (g > 0) & np.isfinite(g) & np.isfinite(p)
    if valid is not None:
        m &= np.asarray(valid, bool)
    if not m.any():
        raise ContractError("depth metrics need at least one valid pixel")
    p, g = p[m], g[m]
    absrel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    delta = float(np.mean(ratio < DELTA_THRESHOLD))
    return absrel, rmse, delta


def nearest_neighbors(src, dst, chunk: int = 2048):
    """For each ``src`` point: (distance, index) of the nearest ``dst`` point.

    Exhaustive below :data:`BRUTE_FORCE_LIMIT` points per side, k-d tree above.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ContractError("nearest neighbours of an empty cloud")
    if max(len(src), len(dst)) > BRUTE_FORCE_LIMIT:
        d, i = cKDTree(dst).query(src)
        return d, i
    dist = np.empty(len(src))
    idx = np.empty(len(src), dtype=int)
    for s in range(0, len(src), chunk):
        block = src[s:s + chunk]
        d2 = np.sum((block[:, None, :] - dst[None, :, :]) ** 2, axis=-1)
        j = np.argmin(d2, axis=1)
        idx[s:s + chunk] = j
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(block)), j])
    return dist, idx


def _unit(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def pointcloud_metrics(pred_cloud, gt_cloud, pred_normals=None, gt_normals=None):
    """(accuracy, completeness, normal consistency).

    Normal consistency is the mean absolute cosine of nearest-neighbour
    matched normals, averaged over both matching directions; ``None`` when
    normals are not given.
    """
    P = np.asarray(pred_cloud, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(G) == 0:
        raise ContractError("point-cloud metrics need non-empty clouds")
    d_pg, i_pg = nearest_neighbors(P, G)
    d_gp, i_gp = nearest_neighbors(G, P)
    nc = None
    if pred_normals is not None and gt_normals is not None:
        Np = _unit(pred_normals)
        Ng = _unit(gt_normals)
        c1 = np.abs(np.sum(Np * Ng[i_pg], axis=1))
        c2 = np.abs(np.sum(Ng * Np[i_gp], axis=1))
        nc = float(0.5 * (c1.mean() + c2.mean()))
    return float(d_pg.mean()), float(d_gp.mean()), nc


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
@dataclass
class EvalReport:
    ate: float | None = None
    rpe_tra: float | None = None
    rpe_rot: float | None = None
    absrel: float | None = None
    rmse: float | None = None
    delta125: float | None = None
    acc: float | None = None
    comp: float | None = None
    nc: float | None = None
    alignment_mode: str = "sim3"

    def metric_names(self) -> list:
        return [f.name for f in fields(self) if f.name != "alignment_mode"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.metric_names()
        w.writerow(names + ["alignment_mode"])
        w.writerow(["" if getattr(self, n) is None else repr(getattr(self, n)) for n in names]
                   + [self.alignment_mode])
        return buf.getvalue()

    def to_table(self) -> str:
        names = self.metric_names() + ["alignment_mode"]
        width = max(map(len, names))
        lines = []
        for n in names:
            v = getattr(self, n)
            lines.append(f"{n:<{width}}  {v if isinstance(v, str) else ('-' if v is None else f'{v:.6g}')}")
        return "\n".join(lines) + "\n"


def _world_cloud(points, poses):
    """Local maps -> one (N, H, W, 3) array in the world of ``poses``."""
    return np.stack([(P - pose.T) @ pose.R for P, pose in zip(points, poses)])


def evaluate_sequence(pred_points, pred_poses, gt_points, gt_depth, gt_poses, gt_valid=None,
                      align: str = "sim3") -> EvalReport:
    """Full metric set for one predicted sequence against ground truth.

    Both trajectories are first re-expressed relative to their frame 0.
    ``sim3`` fits one similarity on the dense point correspondences and uses
    it for depth scale, clouds and (when the camera centres are not
    collinear) a trajectory-only fit for ATE/RPE. ``median`` rescales by the
    median depth ratio; ``none`` leaves the prediction in metric units.
    """
    if align not in ALIGN_MODES:
        raise ContractError(f"alignment must be one of {ALIGN_MODES}, got {align!r}")
    pred_points = np.asarray(pred_points, dtype=np.float64)
    gt_points = np.asarray(gt_points, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if len(pred_points) != len(gt_points) or len(pred_poses) != len(gt_poses) or len(pred_poses) != len(gt_points):
        raise ContractError(f"frame counts differ: {len(pred_points)} predicted vs {len(gt_points)} ground truth")
    valid = gt_depth > 0 if gt_valid is None else np.asarray(gt_valid, bool) & (gt_depth > 0)
    pred_depth = pred_points[..., 2]
    valid &= np.isfinite(pred_depth)
    pp = canonicalize(list(pred_poses))
    gp = canonicalize(list(gt_poses))
    Xp = _world_cloud(pred_points, pp)
    Xg = _world_cloud(gt_points, gp)

    if align == "sim3":
        sim = align_sim3(Xp[valid], Xg[valid])
        depth_scale = sim.scale
        try:
            traj_align = align_sim3(_centers(pp), _centers(gp)) if len(pp) >= 3 else sim
        except AlignmentError:
            traj_align = sim
        cloud = sim.apply(Xp)
    elif align == "median":
        depth_scale = align_median(pred_depth, gt_depth, valid)
        sim = Sim3(depth_scale, np.eye(3), np.zeros(3))
        traj_align, cloud = sim, sim.apply(Xp)
    else:
        depth_scale, traj_align, cloud = 1.0, "none", Xp

    ate, rpe_t, rpe_r = trajectory_metrics(pp, gp, traj_align) if len(pp) >= 2 else (None, None, None)
    absrel, rmse, d125 = depth_metrics(pred_depth * depth_scale, gt_depth, valid)

    n_pred, ok_p = surface_normals(pred_points)
    n_gt, ok_g = surface_normals(np.where(valid[..., None], gt_points, 0.0), valid)
    both = valid & ok_p & ok_g
    # normals rotate with the camera into the common frame
    Rs = [p.R for p in pp]
    Rg = [p.R for p in gp]
    rot_align = sim.R if align == "sim3" else np.eye(3)
    wn_p = np.stack([n_pred[i] @ Rs[i] @ rot_align.T for i in range(len(Rs))])
    wn_g = np.stack([n_gt[i] @ Rg[i] for i in range(len(Rg))])
    if both.any():
        acc, comp, nc = pointcloud_metrics(cloud[both], Xg[both], wn_p[both], wn_g[both])
    else:
        acc, comp, nc = pointcloud_metrics(cloud[valid], Xg[valid])
    return EvalReport(ate, rpe_t, rpe_r, absrel, rmse, d125, acc, comp, nc, align)
