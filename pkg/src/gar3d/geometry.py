"""Rotations, rigid transforms, ray maps, point maps and normals.

Poses are world-to-camera: a world point ``X`` maps to camera coordinates
``P = R @ X + T``. Relative poses compose as 4x4 homogeneous matrices, so
``relative_pose(pose_i, pose_j) = [R|T]_i @ inv([R|T]_j)`` takes camera-j
coordinates to camera-i coordinates.

Most functions accept either numpy arrays or :class:`~gar3d.numkernel.Tensor`
values (with leading batch axes) and return the same kind, so the losses can
reuse them on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import DegenerateInputError, EmptySequenceError
from .numkernel import Tensor

RANK_EPS = 1e-12


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    R: np.ndarray
    T: np.ndarray

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.T
        return M

    @staticmethod
    def from_matrix(M) -> "CameraPose":
        M = np.asarray(M, dtype=np.float64)
        return CameraPose(M[:3, :3].copy(), M[:3, 3].copy())

    def inverse(self) -> "CameraPose":
        Rt = self.R.T
        return CameraPose(Rt, -Rt @ self.T)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self @ other`` as homogeneous matrices."""
        return CameraPose(self.R @ other.R, self.R @ other.T + self.T)

    def center(self) -> np.ndarray:
        return -self.R.T @ self.T


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _mT(x):
    return x.swapaxes(-1, -2)


def _matvec(M, v):
    """Batched ``M @ v`` for (..., 3, 3) x (..., 3)."""
    if _is_tensor(M, v):
        return nk.matmul(M, nk.as_tensor(v)[..., None])[..., 0]
    return np.einsum("...ij,...j->...i", M, v)


def _sum(x, axis):
    return x.sum(axis=axis)


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------
def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues' formula for one axis-angle vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx


def random_rotation(rng) -> np.ndarray:
    """Uniform rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng, translation_scale: float = 1.0) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.normal(size=3) * translation_scale)


def _orthogonalize_np(m: np.ndarray):
    U, S, Vt = np.linalg.svd(m)
    if np.any(S[..., -1] < RANK_EPS):
        raise DegenerateInputError(
            f"rotation input is rank deficient (smallest singular value {S[..., -1].min():.3e})")
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    U = U.copy()
    U[..., :, -1] *= d[..., None]
    return U @ Vt, U, S, Vt, d


def orthogonalize(m):
    """Nearest rotation (Frobenius) to a raw 3x3 matrix via SVD.

    With ``m = U S V^T`` the result is ``U V^T`` after flipping the last
    column of ``U`` whenever ``det(U V^T) < 0``. Accepts a batch ``(..., 3, 3)``.
    For tensors, the backward pass differentiates the polar factor.

    Raises:
        DegenerateInputError: if the smallest singular value is below 1e-12.
    """
    if not isinstance(m, Tensor):
        return _orthogonalize_np(np.asarray(m, dtype=np.float64))[0]
    R, U, S, Vt, d = _orthogonalize_np(m.data)
    V = _mT(Vt)
    # m = R @ Sym with Sym = V diag(e) V^T, e = S with the last entry signed by d
    e = S.copy()
    e[..., -1] *= d
    denom = e[..., :, None] + e[..., None, :]

    def bw(g):
        A = Vt @ _mT(R) @ g @ V
        C = np.divide(A, denom, out=np.zeros_like(A), where=np.abs(denom) > 1e-300)
        idx = np.arange(3)
        C[..., idx, idx] = 0.0
        return (R @ V @ (C - _mT(C)) @ Vt,)
    return Tensor._make(R, (m,), bw)


def geodesic_rot_distance(Ra, Rb):
    """Rotation angle of ``Ra^T Rb`` in radians, in [0, pi].

    Evaluated as ``atan2(|skew(M)|, (tr(M) - 1) / 2)`` with ``M = Ra^T Rb``.
    On SO(3) this equals ``arccos((tr(M) - 1) / 2)`` with the argument clamped
    to [-1, 1], but it stays accurate near 0 and has a finite gradient there.
    Elementwise products keep ``M`` exactly symmetric when ``Ra == Rb``.
    """
    if _is_tensor(Ra, Rb):
        Ra, Rb = nk.as_tensor(Ra), nk.as_tensor(Rb)
        M = (Ra[..., :, :, None] * Rb[..., :, None, :]).sum(axis=-3)
        tr = M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2]
        w = nk.stack([M[..., 2, 1] - M[..., 1, 2],
                      M[..., 0, 2] - M[..., 2, 0],
                      M[..., 1, 0] - M[..., 0, 1]], axis=-1)
        return nk.atan2(nk.norm_lastdim(w) * 0.5, (tr - 1.0) * 0.5)
    Ra, Rb = np.asarray(Ra), np.asarray(Rb)
    M = (Ra[..., :, :, None] * Rb[..., :, None, :]).sum(axis=-3)
    tr = M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2]
    w = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], -1)
    cos = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    return np.arctan2(np.linalg.norm(w, axis=-1) * 0.5, cos)


def rotation_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation (principal branch)."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near pi: axis from the dominant column of (R + I) / 2
        B = (R + np.eye(3)) / 2
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        return axis / np.linalg.norm(axis) * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * theta / (2 * np.sin(theta))


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------
def relative_pose(pose_i, pose_j):
    """``[R|T]_i @ inv([R|T]_j)``: maps camera-j coordinates to camera-i.

    Accepts two :class:`CameraPose` objects, or ``(R, T)`` tuples whose arrays
    or tensors carry matching leading batch axes. Returns the same kind.
    """
    if isinstance(pose_i, CameraPose) and isinstance(pose_j, CameraPose):
        return pose_i.compose(pose_j.inverse())
    Ri, Ti = pose_i
    Rj, Tj = pose_j
    R = Ri @ _mT(Rj)
    return R, Ti - _matvec(R, Tj)


def pairwise_relative_poses(R, T):
    """All ordered relative poses; entry ``[i, j]`` maps camera j to camera i."""
    Ri, Ti = R[:, None], T[:, None]
    Rj, Tj = R[None, :], T[None, :]
    return relative_pose((Ri, Ti), (Rj, Tj))


def apply_world_transform(pose: CameraPose, G: CameraPose) -> CameraPose:
    """Re-express a pose after the world frame is moved by ``G``.

    A world point ``X`` becomes ``G(X)``; the camera must then see the same
    local coordinates, so its world-to-camera map becomes ``pose @ inv(G)``.
    Relative poses are unchanged by this operation.
    """
    return pose.compose(G.inverse())


def transform_points(R, T, X):
    """Apply ``R @ x + T`` to every point of a (..., 3) map."""
    if _is_tensor(R, T, X):
        X = nk.as_tensor(X)
        lead = X.shape[:-1]
        flat = X.reshape(-1, 3)
        out = nk.matmul(flat, _mT(nk.as_tensor(R))) + T
        return out.reshape(lead + (3,))
    X = np.asarray(X)
    return X @ np.asarray(R).T + np.asarray(T)


def local_from_global(X, pose: CameraPose):
    """Camera-frame point map ``P = R X + T``."""
    return transform_points(pose.R, pose.T, X)


def global_from_local(P, pose: CameraPose, anchor: CameraPose | None = None):
    """Express a camera-frame point map in the anchor camera (or world) frame.

    Without an anchor this inverts ``P = R X + T``; with one, the map is taken
    through ``anchor @ inv(pose)``.
    """
    if anchor is None:
        inv = pose.inverse()
        return transform_points(inv.R, inv.T, P)
    rel = relative_pose(anchor, pose)
    return transform_points(rel.R, rel.T, P)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------
def make_intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def pixel_rays(K, H: int, W: int) -> np.ndarray:
    """Unnormalized rays ``K^-1 [u + 0.5, v + 0.5, 1]`` with z = 1; (H, W, 3)."""
    K = np.asarray(K, dtype=np.float64)
    if K[0, 0] <= 0 or K[1, 1] <= 0:
        raise DegenerateInputError("focal lengths must be positive")
    u = np.arange(W) + 0.5
    v = np.arange(H) + 0.5
    uu, vv = np.meshgrid(u, v)
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return pix @ np.linalg.inv(K).T


def local_ray_map(K, H: int, W: int) -> np.ndarray:
    """Unit viewing direction per pixel center; (H, W, 3)."""
    rays = pixel_rays(K, H, W)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def unproject_depth(depth, K) -> np.ndarray:
    """Local point map ``depth * K^-1 [u, v, 1]``; z equals the depth exactly."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    rays = pixel_rays(K, H, W)
    P = rays * depth[..., None]
    P[..., 2] = depth
    return P


# ---------------------------------------------------------------------------
# Normals and scale
# ---------------------------------------------------------------------------
def normal_stencil(P, valid=None, eps: float = 1e-12):
    """Raw cross products of forward differences plus their validity.

    Returns ``(cross, valid)`` with shapes (..., H, W, 3) and (..., H, W).
    The last row and column are always invalid. Works on arrays or tensors;
    the validity mask is always a numpy array.
    """
    H, W = P.shape[-3], P.shape[-2]
    du = P[..., :-1, 1:, :] - P[..., :-1, :-1, :]
    dv = P[..., 1:, :-1, :] - P[..., :-1, :-1, :]
    c = [du[..., 1] * dv[..., 2] - du[..., 2] * dv[..., 1],
         du[..., 2] * dv[..., 0] - du[..., 0] * dv[..., 2],
         du[..., 0] * dv[..., 1] - du[..., 1] * dv[..., 0]]
    raw = P.data if isinstance(P, Tensor) else np.asarray(P)
    lead = raw.shape[:-3]
    if isinstance(P, Tensor):
        cross = nk.stack(c, axis=-1)
        cd = cross.data
    else:
        cross = np.stack(c, axis=-1)
        cd = cross
    ok = np.linalg.norm(cd, axis=-1) >= eps
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        ok &= valid[..., :-1, :-1] & valid[..., :-1, 1:] & valid[..., 1:, :-1]
    ok_full = np.zeros(lead + (H, W), dtype=bool)
    ok_full[..., :-1, :-1] = ok
    return cross, ok_full


def surface_normals(P, valid=None):
    """Unit normals from horizontal/vertical forward differences.

    Args:
        P: (H, W, 3) point map (leading batch axes allowed).
        valid: optional (H, W) boolean mask of usable points.

    Returns:
        (normals, valid) where normals is (H, W, 3) and zero where invalid.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.shape[-3] < 2 or P.shape[-2] < 2:
        raise DegenerateInputError("surface normals need H, W >= 2")
    cross, ok = normal_stencil(P, valid)
    n = np.zeros(P.shape)
    c = cross[ok[..., :-1, :-1]]
    n_inner = np.zeros(cross.shape)
    n_inner[ok[..., :-1, :-1]] = c / np.linalg.norm(c, axis=-1, keepdims=True)
    n[..., :-1, :-1, :] = n_inner
    return n, ok


def sequence_scale(depths, valids=None):
    """Root-mean-square of all valid depth values across a sequence.

    Args:
        depths: list of (H, W) maps or one stacked array/tensor.
        valids: matching boolean masks; all pixels valid when omitted.

    Raises:
        EmptySequenceError: no valid pixel in the whole sequence.
    """
    if isinstance(depths, (list, tuple)):
        if any(isinstance(d, Tensor) for d in depths):
            vals = [nk.as_tensor(d).reshape(-1) for d in depths]
            depths = nk.concat(vals)
            if valids is not None:
                valids = np.concatenate([np.asarray(v, bool).reshape(-1) for v in valids])
        else:
            depths = np.concatenate([np.asarray(d, np.float64).reshape(-1) for d in depths])
            if valids is not None:
                valids = np.concatenate([np.asarray(v, bool).reshape(-1) for v in valids])
    mask = np.ones(depths.shape, bool) if valids is None else np.asarray(valids, bool).reshape(depths.shape)
    count = int(mask.sum())
    if count == 0:
        raise EmptySequenceError("sequence_scale needs at least one valid depth")
    if isinstance(depths, Tensor):
        sq = nk.where(mask, depths * depths, 0.0)
        return (sq.sum() * (1.0 / count)).sqrt()
    d = np.asarray(depths)[mask]
    return float(np.sqrt(np.mean(d * d)))
