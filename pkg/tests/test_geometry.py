import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gar3d import numkernel as nk
from gar3d.checks import nearest_rotation_oracle
from gar3d.errors import DegenerateInputError, EmptySequenceError
from gar3d.geometry import (
    CameraPose,
    apply_world_transform,
    geodesic_rot_distance,
    global_from_local,
    local_from_global,
    local_ray_map,
    make_intrinsics,
    orthogonalize,
    random_pose,
    random_rotation,
    relative_pose,
    rot_z,
    rotation_log,
    sequence_scale,
    surface_normals,
)
from gar3d.numkernel import Rng, Tensor, fd_check

seeds = st.integers(0, 2 ** 31 - 1)


def test_orthogonalize_fixed_points():
    R = rot_z(np.radians(30))
    assert np.allclose(orthogonalize(R), R, atol=1e-14)
    assert np.allclose(orthogonalize(2 * np.eye(3)), np.eye(3), atol=1e-14)


def test_orthogonalize_rejects_rank_deficient():
    with pytest.raises(DegenerateInputError):
        orthogonalize(np.diag([1.0, 1.0, 0.0]))


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_orthogonalize_output_is_rotation(seed):
    m = Rng(seed).normal(size=(3, 3))
    R = orthogonalize(m)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert np.abs(orthogonalize(R) - R).max() < 1e-12


def test_orthogonalize_matches_brute_force_projection():
    rng = Rng(11)
    for _ in range(5):
        m = rng.normal(size=(3, 3))
        assert np.linalg.norm(nearest_rotation_oracle(m, rng) - orthogonalize(m)) < 1e-6


def test_orthogonalize_gradient():
    rng = Rng(12)
    m = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    c = rng.normal(size=(2, 3, 3))
    assert fd_check(lambda t: (orthogonalize(t) * c).sum(), m) < 1e-6


def test_relative_pose_trivial_cases():
    rng = Rng(13)
    p = random_pose(rng)
    ident = relative_pose(p, p)
    assert np.allclose(ident.R, np.eye(3)) and np.allclose(ident.T, 0, atol=1e-14)
    same = relative_pose(p, CameraPose.identity())
    assert np.allclose(same.R, p.R) and np.allclose(same.T, p.T)


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_relative_pose_invariant_to_world_change(seed):
    rng = Rng(seed)
    a, b, G = random_pose(rng), random_pose(rng), random_pose(rng, 3.0)
    r0 = relative_pose(a, b)
    r1 = relative_pose(apply_world_transform(a, G), apply_world_transform(b, G))
    assert np.abs(r0.R - r1.R).max() < 1e-10 and np.abs(r0.T - r1.T).max() < 1e-10


def test_geodesic_examples():
    R = random_rotation(Rng(14))
    assert geodesic_rot_distance(R, R) == pytest.approx(0.0, abs=1e-12)
    assert geodesic_rot_distance(np.eye(3), rot_z(np.pi / 2)) == pytest.approx(np.pi / 2, abs=1e-12)


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_geodesic_matches_log_map(seed):
    rng = Rng(seed)
    Ra, Rb = random_rotation(rng), random_rotation(rng)
    assert abs(geodesic_rot_distance(Ra, Rb) - np.linalg.norm(rotation_log(Ra.T @ Rb))) < 1e-9


def test_geodesic_gradient_finite_near_identity():
    R = Tensor(rot_z(1e-9), requires_grad=True)
    d = geodesic_rot_distance(nk.as_tensor(np.eye(3)), R)
    d.backward()
    assert np.isfinite(R.grad).all()


def test_ray_map_examples():
    H, W = 5, 7
    K = make_intrinsics(W, W, W / 2, H / 2)
    rays = local_ray_map(K, H, W)
    # the pixel whose centre lies on the principal point
    K1 = make_intrinsics(W, W, 3.5, 2.5)
    assert np.allclose(local_ray_map(K1, H, W)[2, 3], [0, 0, 1], atol=1e-15)
    assert np.abs(np.linalg.norm(rays, axis=-1) - 1).max() < 1e-12
    f = float(W)
    Kc = np.diag([f, f, 1.0])
    corner = local_ray_map(Kc, H, W)[H - 1, W - 1]
    u, v = W - 0.5, H - 0.5
    d = np.array([u / f, v / f, 1.0])
    assert np.allclose(corner, d / np.linalg.norm(d), atol=1e-14)


def test_point_map_frame_changes():
    rng = Rng(15)
    X = rng.normal(size=(4, 5, 3))
    assert np.array_equal(local_from_global(X, CameraPose.identity()), X)
    p, a = random_pose(rng), random_pose(rng)
    P = local_from_global(X, p)
    assert np.abs(global_from_local(P, p) - X).max() < 1e-9
    assert np.abs(global_from_local(P, p, anchor=p) - P).max() < 1e-12
    assert np.abs(global_from_local(P, p, anchor=a) - local_from_global(X, a)).max() < 1e-9


def test_normals_of_plane():
    vv, uu = np.mgrid[0:6, 0:6].astype(float)
    P = np.stack([uu, vv, np.full_like(uu, 5.0)], -1)
    n, ok = surface_normals(P)
    assert ok[:-1, :-1].all() and not ok[-1].any() and not ok[:, -1].any()
    assert np.allclose(np.abs(n[ok]), [0, 0, 1])


def test_normals_of_sphere_patch():
    N, half = 64, 0.025
    th = np.linspace(-half, half, N)
    A, B = np.meshgrid(th, th)
    radial = np.stack([np.sin(A) * np.cos(B), np.sin(B), -np.cos(A) * np.cos(B)], -1)
    P = np.array([0.0, 0.0, 5.0]) + radial
    n, ok = surface_normals(P)
    err = np.minimum(np.linalg.norm(n - radial, axis=-1), np.linalg.norm(n + radial, axis=-1))
    assert err[ok].max() < 1e-3


def test_invalid_pixel_propagates_to_stencil_users():
    P = np.random.default_rng(0).normal(size=(5, 5, 3))
    valid = np.ones((5, 5), bool)
    valid[2, 2] = False
    _, ok = surface_normals(P, valid)
    for r, c in [(2, 2), (1, 2), (2, 1)]:
        assert not ok[r, c]
    assert ok[1, 1] and ok[3, 3]


def test_sequence_scale_examples():
    assert sequence_scale(np.full((2, 3, 3), 2.0)) == pytest.approx(2.0)
    d = np.array([[3.0, 4.0], [4.0, 3.0]])
    assert sequence_scale(d) == pytest.approx(np.sqrt(12.5), abs=1e-12)
    with pytest.raises(EmptySequenceError):
        sequence_scale(d, np.zeros_like(d, bool))


@given(seeds, st.floats(0.01, 100))
@settings(max_examples=40, deadline=None)
def test_sequence_scale_homogeneous(seed, k):
    d = Rng(seed).uniform(0.5, 5, size=(3, 4, 4))
    assert sequence_scale(d * k) == pytest.approx(k * sequence_scale(d), rel=1e-12)
