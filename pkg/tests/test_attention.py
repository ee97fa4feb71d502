import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gar3d import numkernel as nk
from gar3d.attention import (
    MAD_FLOOR,
    FrameAttention,
    GlobalAttention,
    ModalAttention,
    ModalEncoder,
    TokenBlock,
    build_group_causal_mask,
    modal_inputs,
    sp_normalize,
)
from gar3d.checks import brute_force_mask
from gar3d.errors import ConfigError, ContractError
from gar3d.geometry import make_intrinsics, random_pose
from gar3d.numkernel import Rng, Tensor, fd_check
from gar3d.synthdata import sample_modalities

DIM, HEADS = 8, 2


def block(rng, F=4, T=3, dtype=np.float64):
    return TokenBlock(Tensor(rng.normal(size=(F, T, DIM)).astype(dtype)), np.arange(F), np.zeros(F, int))


def perturb_params(layer, rng, scale=0.3):
    for p in layer.parameters():
        p.data += scale * rng.normal(size=p.shape)


def test_mask_figures():
    fig_c = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]], bool)
    assert np.array_equal(build_group_causal_mask(4, 2).allow, fig_c)
    assert build_group_causal_mask(4, 4).allow.all()
    assert np.array_equal(build_group_causal_mask(3, 1).allow, np.tril(np.ones((3, 3), bool)))


def test_mask_rejects_bad_group_size():
    with pytest.raises(ContractError):
        build_group_causal_mask(4, 0)


@pytest.mark.parametrize("N", range(1, 9))
def test_mask_matches_brute_force(N):
    for G in range(1, N + 1):
        assert np.array_equal(build_group_causal_mask(N, G).allow, brute_force_mask(N, G))


@given(st.integers(1, 12), st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_mask_monotone_over_later_groups(N, G):
    allow = build_group_causal_mask(N, G).allow
    grp = np.arange(N) // G
    for i in range(N):
        for j in range(N):
            if allow[i, j]:
                assert allow[grp >= grp[i], j].all()


def test_frame_attention_isolates_frames():
    rng = Rng(0)
    fa = FrameAttention(DIM, HEADS, rng)
    b = block(rng)
    out = fa(b).tokens.data
    pert = b.tokens.data.copy()
    pert[2] += 1.0
    out2 = fa(TokenBlock(Tensor(pert), b.frame_ids, b.group_ids)).tokens.data
    keep = [0, 1, 3]
    assert np.array_equal(out[keep], out2[keep])
    assert not np.allclose(out[2], out2[2])


def test_frame_attention_single_frame_equals_global_unmasked():
    rng = Rng(1)
    fa = FrameAttention(DIM, HEADS, rng)
    ga = GlobalAttention(DIM, HEADS, Rng(99))
    for name, p in ga.named_parameters().items():
        p.data[...] = fa.named_parameters()[name].data
    b = block(rng, F=1)
    g, _ = ga(b)
    assert np.allclose(fa(b).tokens.data, g.tokens.data, atol=1e-14)


def test_dim_not_divisible_by_heads():
    with pytest.raises(ConfigError):
        FrameAttention(10, 4, Rng(0))


def test_frame_attention_gradient():
    rng = Rng(2)
    fa = FrameAttention(DIM, HEADS, rng)
    x = Tensor(rng.normal(size=(2, 3, DIM)), requires_grad=True)
    c = rng.normal(size=(2, 3, DIM))
    f = lambda t: (fa(TokenBlock(t, np.arange(2), np.zeros(2, int))).tokens * c).sum()
    assert fd_check(f, x) < 1e-5


def test_global_attention_all_true_mask_is_unmasked():
    rng = Rng(3)
    ga = GlobalAttention(DIM, HEADS, rng)
    b = block(rng)
    a, _ = ga(b, build_group_causal_mask(4, 4))
    u, _ = ga(b)
    assert np.array_equal(a.tokens.data, u.tokens.data)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_global_attention_cached_matches_masked(dtype, tol):
    rng = Rng(4)
    ga = GlobalAttention(DIM, HEADS, rng, dtype)
    b = block(rng, dtype=dtype)
    off, _ = ga(b, build_group_causal_mask(4, 1))
    K = np.zeros((0, DIM), dtype)
    V = np.zeros((0, DIM), dtype)
    for i in range(4):
        cur = TokenBlock(b.tokens[i:i + 1], b.frame_ids[i:i + 1], b.group_ids[i:i + 1])
        counter = {}
        on, (k, v) = ga(cur, past_kv=(K, V), counter=counter)
        assert counter["keys"] == (i + 1) * 3
        assert np.abs(on.tokens.data[0] - off.tokens.data[i]).max() < tol
        K, V = np.concatenate([K, k.data]), np.concatenate([V, v.data])


def test_global_attention_cache_width_mismatch():
    rng = Rng(5)
    ga = GlobalAttention(DIM, HEADS, rng)
    with pytest.raises(ConfigError):
        ga(block(rng, F=1), past_kv=(np.zeros((3, DIM + 1)), np.zeros((3, DIM + 1))))


def test_global_attention_is_causal_across_groups():
    rng = Rng(6)
    ga = GlobalAttention(DIM, HEADS, rng)
    b = block(rng)
    mask = build_group_causal_mask(4, 2)
    out = ga(b, mask)[0].tokens.data
    pert = b.tokens.data.copy()
    pert[2:] += rng.normal(size=pert[2:].shape)
    out2 = ga(TokenBlock(Tensor(pert), b.frame_ids, b.group_ids), mask)[0].tokens.data
    assert np.array_equal(out[:2], out2[:2])


def test_global_attention_permutation_equivariant_within_group():
    rng = Rng(7)
    ga = GlobalAttention(DIM, HEADS, rng)
    b = block(rng)
    mask = build_group_causal_mask(4, 2)
    out = ga(b, mask)[0].tokens.data
    perm = [1, 0, 2, 3]
    out_p = ga(TokenBlock(b.tokens[np.array(perm)], b.frame_ids, b.group_ids), mask)[0].tokens.data
    assert np.allclose(out_p[:2], out[[1, 0]], atol=1e-12)
    assert np.allclose(out_p[2:], out[2:], atol=1e-12)


def test_modal_attention_is_identity_at_init():
    rng = Rng(8)
    ma = ModalAttention(DIM, HEADS, rng)
    x = Tensor(rng.normal(size=(2, 5, DIM)))
    m = Tensor(rng.normal(size=(2, 5, DIM)))
    assert np.array_equal(ma(x, m).data, x.data)


def test_modal_attention_misalignment():
    rng = Rng(9)
    ma = ModalAttention(DIM, HEADS, rng)
    with pytest.raises(ContractError):
        ma(Tensor(np.zeros((2, 5, DIM))), Tensor(np.zeros((2, 4, DIM))))


def test_modal_attention_absent_modalities_depend_on_image_only():
    rng = Rng(10)
    ma = ModalAttention(DIM, HEADS, rng)
    enc = ModalEncoder(DIM, 2, rng)
    perturb_params(ma, rng)
    zero = enc([modal_inputs(4, 4)]).tokens
    x = Tensor(rng.normal(size=zero.shape))
    assert np.array_equal(ma(x, zero).data, ma(x, enc([modal_inputs(4, 4)]).tokens).data)


def test_modal_attention_gradient():
    rng = Rng(11)
    ma = ModalAttention(DIM, HEADS, rng)
    perturb_params(ma, rng)
    x = Tensor(rng.normal(size=(2, 3, DIM)), requires_grad=True)
    m = Tensor(rng.normal(size=(2, 3, DIM)), requires_grad=True)
    c = rng.normal(size=(2, 3, DIM))
    assert fd_check(lambda t: (ma(t, m) * c).sum(), x) < 1e-5
    assert fd_check(lambda t: (ma(x, t) * c).sum(), m) < 1e-5
    out_w = ma.out.named_parameters()["weight"]
    assert fd_check(lambda _t: (ma(x, m) * c).sum(), out_w) < 1e-5


def test_encoder_all_absent_is_identical_across_frames():
    enc = ModalEncoder(DIM, 2, Rng(12))
    tok = enc([modal_inputs(4, 4), modal_inputs(4, 4)]).tokens.data
    assert np.array_equal(tok[0], tok[1])


def test_sp_normalize_constant_depth():
    d = np.full((4, 4), 3.0)
    assert np.array_equal(sp_normalize(d), np.zeros((4, 4)))
    v = np.array([2.0, 2.0, 2.0, 2.0 + 1e-9])
    assert sp_normalize(v)[3] == pytest.approx(1e-9 / MAD_FLOOR, rel=1e-6)


def test_depth_without_valid_pixels_is_absent():
    m = modal_inputs(4, 4, depth=np.zeros((4, 4)))
    assert not m.has_depth and not m.pixels.any()


def test_absent_modalities_are_zero_arrays():
    m = modal_inputs(4, 4)
    assert not m.pixels.any() and not m.pose.any()
    full = modal_inputs(4, 4, np.ones((4, 4)) + np.eye(4), None, make_intrinsics(4, 4, 2, 2), random_pose(Rng(0)))
    assert full.has_depth and full.has_intrinsics and full.has_extrinsics


def test_presence_flags_round_trip_through_sampler():
    mask = sample_modalities(3, 6)
    H = W = 4
    K = make_intrinsics(4, 4, 2, 2)
    pose = random_pose(Rng(1))
    depth = Rng(2).uniform(1, 2, size=(H, W))
    for i in range(6):
        d, k, e = mask.has_depth[i], mask.has_intrinsics[i], mask.has_extrinsics[i]
        m = modal_inputs(H, W, depth if d else None, None, K if k else None, pose if e else None)
        assert (m.has_depth, m.has_intrinsics, m.has_extrinsics) == (bool(d), bool(k), bool(e))
