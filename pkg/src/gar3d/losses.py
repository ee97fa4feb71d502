"""Five-term scale-adaptive training objective.

All terms read camera extrinsics only through relative poses, so they do not
depend on which frame (if any) defines the world. Point terms compare maps
after dividing by a per-sequence scale, except the confidence-weighted
absolute term, which is what pins the predicted scale to the true one.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ContractError
from .geometry import (
    CameraPose,
    geodesic_rot_distance,
    normal_stencil,
    pairwise_relative_poses,
    relative_pose,
    sequence_scale,
    surface_normals,
    transform_points,
)
from .numkernel import Rng, Tensor

TRANSLATION_WEIGHT = 10.0       # lambda: translation vs rotation in the camera term
CONFIDENCE_LOG_WEIGHT = 0.2     # alpha: pull of the -log C regularizer
MIN_NORMAL_PIXELS = 4


@dataclass
class LossBreakdown:
    rel_cam: Tensor
    rel_point: Tensor
    abs_point: Tensor
    snormal: Tensor
    normal: Tensor
    total: Tensor
    s_hat: float
    s_gt: float

    CSV_FIELDS = ("rel_cam", "rel_point", "abs_point", "snormal", "normal", "total", "s_hat", "s_gt")

    def values(self) -> dict:
        out = {}
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            out[name] = float(v.item() if isinstance(v, Tensor) else v)
        return out


def _as_pose_arrays(poses):
    """(R, T) from a list of CameraPose or an (R, T) pair of arrays/tensors."""
    if isinstance(poses, (list, tuple)) and poses and isinstance(poses[0], CameraPose):
        return np.stack([p.R for p in poses]), np.stack([p.T for p in poses])
    R, T = poses
    return R, T


def _default_valid(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    return np.isfinite(d) & (d > 0)


def _frame_weights(valid: np.ndarray, depth: np.ndarray | None):
    """Per-pixel weights giving a per-frame mean, averaged over non-empty frames."""
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    nonempty = counts > 0
    if not nonempty.any():
        raise ContractError("no valid pixel in any frame")
    w = valid / np.maximum(counts, 1)[:, None, None]
    if depth is not None:
        w = w / np.where(valid, depth, 1.0)
    return w / nonempty.sum()


def loss_rel_cam(pred_poses, gt_poses, s_hat, s_gt, lam: float = TRANSLATION_WEIGHT):
    """Mean over ordered pairs i != j of rotation angle + lam * scaled L1 translation error."""
    Rp, Tp = _as_pose_arrays(pred_poses)
    Rg, Tg = _as_pose_arrays(gt_poses)
    N = Rp.shape[0]
    if N < 2:
        raise ContractError(f"relative camera loss needs at least 2 frames, got {N}")
    ii, jj = np.nonzero(~np.eye(N, dtype=bool))
    Rpr, Tpr = pairwise_relative_poses(Rp, Tp)
    Rgr, Tgr = pairwise_relative_poses(np.asarray(Rg, np.float64), np.asarray(Tg, np.float64))
    rot = geodesic_rot_distance(Rpr[ii, jj], Rgr[ii, jj])
    diff = Tpr[ii, jj] / s_hat - Tgr[ii, jj] / s_gt
    trans = nk.tabs(diff).sum(axis=-1) if isinstance(diff, Tensor) else np.abs(diff).sum(-1)
    return (rot + trans * lam).sum() * (1.0 / (N * (N - 1)))


def loss_rel_point(pred_P, gt_P, gt_D, s_hat, s_gt, valid=None):
    """Depth-weighted L1 between scale-normalized local point maps."""
    gt_D = np.asarray(gt_D, dtype=np.float64)
    valid = _default_valid(gt_D) if valid is None else np.asarray(valid, bool) & _default_valid(gt_D)
    w = _frame_weights(valid, gt_D)
    gt = np.where(valid[..., None], gt_P, 0.0)
    diff = nk.as_tensor(pred_P) / s_hat - gt / s_gt
    return (nk.tabs(diff).sum(axis=-1) * w).sum()


def loss_abs_point(pred_P, gt_P, gt_D, confidence, valid=None, alpha: float = CONFIDENCE_LOG_WEIGHT):
    """Confidence-weighted depth-normalized L1 on raw (metric) local points, minus alpha log C."""
    C = nk.as_tensor(confidence)
    if np.any(C.data < 1.0):
        raise ContractError(f"confidence must be >= 1, min is {float(C.data.min())}")
    gt_D = np.asarray(gt_D, dtype=np.float64)
    valid = _default_valid(gt_D) if valid is None else np.asarray(valid, bool) & _default_valid(gt_D)
    w = _frame_weights(valid, None)
    inv_d = 1.0 / np.where(valid, gt_D, 1.0)
    gt = np.where(valid[..., None], gt_P, 0.0)
    err = nk.tabs(nk.as_tensor(pred_P) - gt).sum(axis=-1) * inv_d
    return ((C * err - nk.log(C) * alpha) * w).sum()


def _zero_like(x) -> Tensor:
    return nk.as_tensor(x).sum() * 0.0


def loss_normal(pred_P, gt_P, valid=None):
    """Mean of ``1 - cos`` between predicted and true surface normals.

    Args:
        pred_P, gt_P: (..., H, W, 3) point maps; every leading index is a grid.
        valid: (..., H, W) mask of usable ground-truth pixels.
    """
    pred = nk.as_tensor(pred_P)
    gt_P = np.asarray(gt_P, dtype=np.float64)
    valid = np.isfinite(gt_P).all(-1) if valid is None else np.asarray(valid, bool)
    if valid.sum() < MIN_NORMAL_PIXELS:
        warnings.warn(f"normal loss: only {int(valid.sum())} valid pixels; returning 0", stacklevel=2)
        return _zero_like(pred)
    n_gt, ok_gt = surface_normals(np.where(valid[..., None], gt_P, 0.0), valid)
    cross, ok_pred = normal_stencil(pred)
    ok = ok_gt & ok_pred
    if not ok.any():
        warnings.warn("normal loss: no valid normal; returning 0", stacklevel=2)
        return _zero_like(pred)
    idx = np.nonzero(ok)
    c = cross[idx]
    cos = (c * n_gt[idx]).sum(axis=-1) / nk.norm_lastdim(c)
    return (1.0 - cos).mean()


def shuffle_to_grid(X, width: int, perm_seed: int | None):
    """Concatenate all frames' pixels, permute them, and fold into (H', width, ...).

    ``perm_seed=None`` keeps the row-major order. Leftover pixels that do not
    fill a complete row are dropped.
    """
    is_t = isinstance(X, Tensor)
    tail = X.shape[3:]
    n = int(np.prod(X.shape[:3]))
    flat = X.reshape((n,) + tail)
    perm = np.arange(n) if perm_seed is None else Rng(perm_seed).permutation(n)
    rows = n // width
    perm = perm[:rows * width]
    out = flat[perm] if is_t else np.asarray(flat)[perm]
    return out.reshape((rows, width) + tail)


def loss_shuffled_normal(pred_X, gt_X, perm_seed: int | None = 0, valid=None):
    """Normal loss on a virtual grid of pixels shuffled across all frames.

    ``pred_X`` and ``gt_X`` are (N, H, W, 3) global maps expressed in the same
    relative frame; the same permutation is applied to both.
    """
    gt_X = np.asarray(gt_X, dtype=np.float64)
    W = gt_X.shape[2]
    if valid is None:
        valid = np.isfinite(gt_X).all(-1)
    grid_valid = shuffle_to_grid(np.asarray(valid, bool), W, perm_seed)
    return loss_normal(shuffle_to_grid(nk.as_tensor(pred_X), W, perm_seed),
                       shuffle_to_grid(gt_X, W, perm_seed), grid_valid)


def anchored_global_maps(R, T, P, anchor: int = 0):
    """Local maps of every frame expressed in frame ``anchor`` via relative poses."""
    Rr, Tr = relative_pose((R[anchor][None], T[anchor][None]), (R, T))
    N = P.shape[0]
    if isinstance(P, Tensor) or isinstance(Rr, Tensor):
        return nk.stack([transform_points(Rr[i], Tr[i], P[i]) for i in range(N)])
    return np.stack([transform_points(Rr[i], Tr[i], P[i]) for i in range(N)])


def total_loss(pred, gt, perm_seed: int | None = 0) -> LossBreakdown:
    """Sum of the five terms with the scale factors computed from depths.

    Args:
        pred: a :class:`~gar3d.model.ModelOutput`.
        gt: object with ``local_points`` (N, H, W, 3), ``depth`` (N, H, W),
            ``valid`` (N, H, W), ``rotations`` (N, 3, 3), ``translations`` (N, 3).
        perm_seed: seed of the cross-frame pixel shuffle.
    """
    valid = np.asarray(gt.valid, bool) & _default_valid(gt.depth)
    P_hat = pred.local_points
    s_hat = sequence_scale(P_hat[..., 2], valid)
    s_gt = sequence_scale(np.asarray(gt.depth), valid)
    Rg, Tg = np.asarray(gt.rotations), np.asarray(gt.translations)
    rel_cam = loss_rel_cam((pred.rotation, pred.translation), (Rg, Tg), s_hat, s_gt)
    rel_point = loss_rel_point(P_hat, gt.local_points, gt.depth, s_hat, s_gt, valid)
    abs_point = loss_abs_point(P_hat, gt.local_points, gt.depth, pred.confidence, valid)
    X_hat = anchored_global_maps(pred.rotation, pred.translation, P_hat)
    X_gt = anchored_global_maps(Rg, Tg, np.where(valid[..., None], gt.local_points, 0.0))
    snormal = loss_shuffled_normal(X_hat, X_gt, perm_seed, valid)
    normal = loss_normal(P_hat, gt.local_points, valid)
    total = rel_cam + rel_point + abs_point + snormal + normal
    return LossBreakdown(rel_cam, rel_point, abs_point, snormal, normal, total,
                         float(s_hat.item()), float(s_gt))
