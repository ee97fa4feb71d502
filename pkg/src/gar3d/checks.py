"""Self-check suite: numerical invariants with tolerances and measured values."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkernel as nk
from .attention import build_group_causal_mask
from .geometry import (
    CameraPose,
    apply_world_transform,
    orthogonalize,
    random_pose,
)
from .kvcache import POLICIES, KVQueue, stride_victim
from .losses import (
    anchored_global_maps,
    loss_abs_point,
    loss_normal,
    loss_rel_cam,
    loss_rel_point,
    loss_shuffled_normal,
    total_loss,
)
from .model import FrameBundle, GroupAutoregressiveModel, ModelConfig, ModelOutput
from .numkernel import Rng, Tensor, fd_check


@dataclass
class CheckResult:
    name: str
    tolerance: float
    measured: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} measured={self.measured:.3e}  tolerance={self.tolerance:.1e}"


def _result(name, tol, measured, t0, passed=None) -> CheckResult:
    ok = measured <= tol if passed is None else passed
    return CheckResult(name, tol, float(measured), bool(ok), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Oracles shared with the tests
# ---------------------------------------------------------------------------
def brute_force_mask(N: int, G: int) -> np.ndarray:
    """Frame i may see frame j iff j's group does not come after i's group."""
    out = np.zeros((N, N), bool)
    for i in range(N):
        for j in range(N):
            out[i, j] = (j // G) <= (i // G)
    return out


def mask_mismatches(builder: Callable = build_group_causal_mask, n_max: int = 8) -> int:
    bad = 0
    for N in range(1, n_max + 1):
        for G in range(1, N + 1):
            allow = np.asarray(getattr(builder(N, G), "allow", builder(N, G)))
            if allow.shape != (N, N) or not np.array_equal(allow, brute_force_mask(N, G)):
                bad += 1
    return bad


def gap_variance(ids) -> float:
    return float(np.var(np.diff(np.asarray(ids, dtype=np.float64)))) if len(ids) > 2 else 0.0


def stride_oracle(ids, n_current: int) -> int:
    """Exhaustive: evict the interior old frame leaving the lowest gap variance (older on ties)."""
    n_old = len(ids) - n_current
    if n_old <= 1:
        return 0
    best, best_var = None, None
    for k in range(1, n_old):
        rest = list(ids[:k]) + list(ids[k + 1:])
        v = gap_variance(rest)
        if best_var is None or v < best_var - 1e-12:
            best, best_var = k, v
    return best


def nearest_rotation_oracle(m, rng: Rng, samples: int = 100_000) -> np.ndarray:
    """Brute-force Frobenius projection onto SO(3): best random sample, then local refinement."""
    from scipy.optimize import least_squares, root
    from scipy.spatial.transform import Rotation

    m = np.asarray(m, dtype=np.float64)
    cand = Rotation.random(samples, random_state=int(rng.integers(0, 2 ** 31))).as_matrix()
    R0 = cand[np.argmin(np.sum((cand - m) ** 2, axis=(1, 2)))]

    def resid(w):
        return (R0 @ Rotation.from_rotvec(w).as_matrix() - m).ravel()

    w = least_squares(resid, np.zeros(3), xtol=1e-15, ftol=1e-15, gtol=1e-15).x

    # the cost is flat near the optimum when singular values are close, so finish on the
    # stationarity condition instead: R^T m is symmetric at a minimizer
    def skew(w):
        A = (R0 @ Rotation.from_rotvec(w).as_matrix()).T @ m
        return np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])

    sol = root(skew, w, method="hybr")
    if np.linalg.norm(skew(sol.x)) < np.linalg.norm(skew(w)) and \
            np.sum(resid(sol.x) ** 2) <= np.sum(resid(w) ** 2) + 1e-9:
        w = sol.x
    return R0 @ Rotation.from_rotvec(w).as_matrix()


def random_rigid(rng: Rng, scale: float = 2.0) -> CameraPose:
    return random_pose(rng, scale)


def tiny_scene(rng: Rng, N: int = 3, H: int = 6, W: int = 6):
    """Random ground truth with smooth positive depths (duck-typed for total_loss)."""
    from .geometry import make_intrinsics, unproject_depth

    class _GT:
        pass

    K = make_intrinsics(W, W, W / 2, H / 2)
    gt = _GT()
    vv, uu = np.mgrid[0:H, 0:W]
    depth = np.stack([2.0 + 0.1 * rng.normal() * uu + 0.1 * rng.normal() * vv + 0.3 * rng.random((H, W))
                      for _ in range(N)])
    gt.depth = depth
    gt.valid = depth > 0
    gt.local_points = np.stack([unproject_depth(d, K) for d in depth])
    poses = [random_pose(rng, 1.0) for _ in range(N)]
    gt.rotations = np.stack([p.R for p in poses])
    gt.translations = np.stack([p.T for p in poses])
    return gt


def perturbed_output(gt, rng: Rng, noise: float = 0.05) -> ModelOutput:
    """Model-output-shaped prediction near ``gt`` with grad-tracked tensors."""
    N = gt.depth.shape[0]
    P = Tensor(gt.local_points * (1 + noise * rng.normal(size=gt.local_points.shape)), requires_grad=True)
    raw = Tensor(gt.rotations + noise * rng.normal(size=(N, 3, 3)), requires_grad=True)
    T = Tensor(gt.translations + noise * rng.normal(size=(N, 3)), requires_grad=True)
    C = Tensor(1.0 + np.exp(rng.normal(size=gt.depth.shape)), requires_grad=True)
    return ModelOutput(P, C, raw, orthogonalize(raw), T, np.arange(N))


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------
def check_mask(builder: Callable = build_group_causal_mask) -> CheckResult:
    t0 = time.perf_counter()
    bad = mask_mismatches(builder)
    return _result("mask_oracle", 0, bad, t0)


def check_so3(n: int = 2000, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = Rng(seed)
    M = rng.normal(size=(n, 3, 3))
    R = orthogonalize(M)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    det = np.abs(np.linalg.det(R) - 1).max()
    idem = np.abs(orthogonalize(R) - R).max()
    return _result("so3_orthogonalize", 1e-9, max(ortho, det, idem), t0)


def _loss_fns(gt, s_gt):
    s_hat = 1.3
    return {
        "rel_cam": lambda P, R, T, C: loss_rel_cam((orthogonalize(R), T), (gt.rotations, gt.translations),
                                                   s_hat, s_gt),
        "rel_point": lambda P, R, T, C: loss_rel_point(P, gt.local_points, gt.depth, s_hat, s_gt),
        "abs_point": lambda P, R, T, C: loss_abs_point(P, gt.local_points, gt.depth, C),
        "normal": lambda P, R, T, C: loss_normal(P, gt.local_points),
        "snormal": lambda P, R, T, C: loss_shuffled_normal(
            anchored_global_maps(orthogonalize(R), T, P),
            anchored_global_maps(gt.rotations, gt.translations, gt.local_points), perm_seed=3),
    }


def significant_indices(grad: np.ndarray, k: int, rng: Rng, floor: float = 1e-5) -> list:
    """Up to ``k`` random coordinates whose gradient exceeds ``floor`` in magnitude.

    Central differences carry ~1e-10 absolute round-off, so relative errors on
    near-zero gradients measure noise rather than the tape.
    """
    cand = np.argwhere(np.abs(grad) > floor)
    if len(cand) == 0:
        return []
    pick = rng.choice(len(cand), size=min(k, len(cand)), replace=False)
    return [tuple(int(i) for i in cand[j]) for j in pick]


def loss_gradient_errors(instances: int = 10, seed: int = 0, coords: int = 6) -> dict:
    """Worst fd relative error per loss term over random tiny instances."""
    worst = {}
    for k in range(instances):
        rng = Rng(seed).child(k)
        gt = tiny_scene(rng)
        out = perturbed_output(gt, rng)
        P, R, T, C = out.local_points, out.raw_rotation, out.translation, out.confidence
        for name, fn in _loss_fns(gt, 2.1).items():
            def f(_x, fn=fn):
                return fn(P, R, T, C)
            for x in (P, R, T, C):
                x.grad = None
            nk.backward(f(None))
            grads = [None if x.grad is None else x.grad.copy() for x in (P, R, T, C)]
            for x, g in zip((P, R, T, C), grads):
                if g is None:
                    continue
                idx = significant_indices(g, coords, rng)
                if idx:
                    worst[name] = max(worst.get(name, 0.0), fd_check(f, x, 1e-6, idx))
            worst.setdefault(name, 0.0)
    return worst


def check_loss_gradients(instances: int = 3) -> CheckResult:
    t0 = time.perf_counter()
    worst = loss_gradient_errors(instances)
    return _result("loss_gradients", 1e-4, max(worst.values()), t0)


def tiny_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(layers=2, dim=32, heads=4, patch_size=4, height=8, width=8, seed=seed)


def end_to_end_gradient_error(seed: int = 0, coords_per_param: int = 2, params: int = 8) -> float:
    """fd check of total loss w.r.t. a sample of model parameters (2 frames, 8x8)."""
    rng = Rng(seed)
    model = GroupAutoregressiveModel(tiny_model_config(seed))
    for p in model.parameters():        # move off the zero-initialized gates
        p.data += 0.02 * rng.normal(size=p.shape)
    gt = tiny_scene(rng, N=2, H=8, W=8)
    frames = [FrameBundle(rng.random((8, 8)), depth=gt.depth[i] if i == 0 else None) for i in range(2)]

    def f(_x):
        return total_loss(model.forward_offline(frames, group_size=1), gt, perm_seed=seed).total

    model.zero_grad()
    nk.backward(f(None))
    named = list(model.named_parameters().values())
    grads = [p.grad.copy() for p in named]
    pick = rng.choice(len(named), size=min(params, len(named)), replace=False)
    worst = 0.0
    for i in pick:
        idx = significant_indices(grads[int(i)], coords_per_param, rng)
        if idx:
            worst = max(worst, fd_check(f, named[int(i)], 1e-6, idx))
    model.zero_grad()
    return worst


def check_end_to_end_gradient() -> CheckResult:
    t0 = time.perf_counter()
    return _result("end_to_end_gradient", 1e-3, end_to_end_gradient_error(), t0)


def mode_equivalence_error(config: ModelConfig, N: int, G: int, seed: int = 0) -> float:
    model = GroupAutoregressiveModel(config)
    rng = Rng(seed)
    frames = [FrameBundle(rng.random((config.height, config.width))) for _ in range(N)]
    off = model.forward_offline(frames, group_size=G)
    on = ModelOutput.concat(model.forward_online(frames, group_size=G))
    return max(float(np.abs(off.local_points.data - on.local_points.data).max()),
               float(np.abs(off.translation.data - on.translation.data).max()),
               float(np.abs(off.rotation.data - on.rotation.data).max()))


def check_cache_equivalence() -> CheckResult:
    t0 = time.perf_counter()
    cfg = ModelConfig(layers=2, dim=32, heads=4)
    err = max(mode_equivalence_error(cfg, 4, G) for G in (1, 2, 4))
    return _result("cache_equivalence", 1e-10, err, t0)


def check_anchor_freedom(trials: int = 20, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(trials):
        rng = Rng(seed).child(k)
        gt = tiny_scene(rng)
        out = perturbed_output(gt, rng)
        G = random_rigid(rng)
        moved = [apply_world_transform(p, G) for p in out.poses()]
        R2 = np.stack([p.R for p in moved])
        T2 = np.stack([p.T for p in moved])
        for fn in (
            lambda R, T: loss_rel_cam((R, T), (gt.rotations, gt.translations), 1.2, 2.0),
            lambda R, T: loss_shuffled_normal(anchored_global_maps(R, T, out.local_points.data),
                                              anchored_global_maps(gt.rotations, gt.translations,
                                                                   gt.local_points), 1),
        ):
            a = float(np.asarray(_val(fn(out.rotation.data, out.translation.data))))
            b = float(np.asarray(_val(fn(R2, T2))))
            worst = max(worst, abs(a - b))
    return _result("anchor_freedom", 1e-9, worst, t0)


def _val(x):
    return x.item() if isinstance(x, Tensor) else x


def scale_property_values(k: float, seed: int = 0) -> dict:
    """Loss terms for a prediction equal to ground truth scaled by ``k`` (C = 1)."""
    from .geometry import sequence_scale
    rng = Rng(seed)
    gt = tiny_scene(rng)
    P = gt.local_points * k
    T = gt.translations * k
    s_gt = sequence_scale(gt.depth, gt.valid)
    s_hat = sequence_scale(P[..., 2], gt.valid)
    C = np.ones(gt.depth.shape)
    return {
        "rel_cam": _val(loss_rel_cam((gt.rotations, T), (gt.rotations, gt.translations), s_hat, s_gt)),
        "rel_point": _val(loss_rel_point(P, gt.local_points, gt.depth, s_hat, s_gt)),
        "abs_point": _val(loss_abs_point(P, gt.local_points, gt.depth, C)),
    }


def check_scale_property() -> CheckResult:
    t0 = time.perf_counter()
    worst_rel, ok = 0.0, True
    for k in (0.25, 0.5, 2.0, 4.0):
        v = scale_property_values(k)
        worst_rel = max(worst_rel, abs(v["rel_cam"]), abs(v["rel_point"]))
        ok &= v["abs_point"] > 0
    ok &= abs(scale_property_values(1.0)["abs_point"]) < 1e-12
    return _result("scale_adaptive", 1e-10, worst_rel, t0, passed=ok and worst_rel < 1e-10)


def check_eviction(seed: int = 0, trials: int = 200) -> CheckResult:
    t0 = time.perf_counter()
    rng = Rng(seed)
    bad = 0
    for policy in POLICIES:
        for Q in (1, 2, 3, 5):
            q = KVQueue(1, 1, 1, Q, policy, seed)
            fid = 0
            for _ in range(12):
                G = int(rng.integers(1, Q + 1))
                ids = list(range(fid, fid + G))
                fid += G + int(rng.integers(0, 3))
                z = np.zeros((G, 1, 1))
                q.insert_group(ids, [z], [z])
                bad += len(q) > Q
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        ids = sorted(rng.choice(40, size=n, replace=False).tolist())
        bad += stride_victim(ids, 1) != stride_oracle(ids, 1)
    return _result("eviction_policies", 0, bad, t0)


def check_constants() -> CheckResult:
    from .losses import CONFIDENCE_LOG_WEIGHT, TRANSLATION_WEIGHT
    from .synthdata import IMAGE_ONLY_PROB, MODALITY_PROB
    t0 = time.perf_counter()
    ok = (TRANSLATION_WEIGHT, CONFIDENCE_LOG_WEIGHT, IMAGE_ONLY_PROB, MODALITY_PROB) == (10.0, 0.2, 0.1, 0.5)
    return _result("constants", 0, 0 if ok else 1, t0)


def run_checks(mask_builder: Callable = build_group_causal_mask) -> list:
    """Run every check; ``mask_builder`` can be swapped to test the harness itself."""
    return [
        check_mask(mask_builder),
        check_so3(),
        check_constants(),
        check_eviction(),
        check_anchor_freedom(),
        check_scale_property(),
        check_loss_gradients(),
        check_cache_equivalence(),
        check_end_to_end_gradient(),
    ]
