import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gar3d.checks import gap_variance, stride_oracle
from gar3d.errors import ConfigError, ContractError, FormatError
from gar3d.kvcache import POLICIES, KVQueue, attend_with_cache, stride_victim
from gar3d.model import FrameBundle, GroupAutoregressiveModel, ModelConfig, ModelOutput
from gar3d.numkernel import Rng


def filled(policy, Q, ids, layers=1, T=1, D=1):
    q = KVQueue(layers, T, D, Q, policy, seed=0)
    for i in ids:
        k = np.full((1, T, D), float(i))
        q.insert_group([i], [k] * layers, [k + 100] * layers)
    return q


def insert_one(q, i):
    k = np.full((1, q.tokens_per_frame, q.dim), float(i))
    return q.insert_group([i], [k] * q.layers, [k + 100] * q.layers)


def test_fifo_evicts_oldest():
    q = filled("fifo", 5, [1, 2, 3, 4, 5])
    assert insert_one(q, 6) == [1]
    assert q.frame_ids == [2, 3, 4, 5, 6]


def test_stride_example():
    q = filled("stride", 5, [1, 2, 3, 4, 5])
    assert insert_one(q, 6) == [2]
    assert q.frame_ids == [1, 3, 4, 5, 6]
    assert stride_oracle([1, 2, 3, 4, 5, 6], 1) == 1


def test_merge_averages_two_oldest():
    q = filled("merge", 4, [1, 2, 3, 4])
    insert_one(q, 5)
    assert q.frame_ids == [1, 3, 4, 5]
    assert q.keys[0][0, 0, 0] == 1.5 and q.values[0][0, 0, 0] == 101.5
    assert [q.keys[0][i, 0, 0] for i in range(1, 4)] == [3.0, 4.0, 5.0]


def test_group_larger_than_capacity():
    q = KVQueue(1, 1, 1, 2)
    z = np.zeros((3, 1, 1))
    with pytest.raises(ContractError):
        q.insert_group([0, 1, 2], [z], [z])


def test_ids_must_increase():
    q = filled("fifo", 3, [4])
    with pytest.raises(ContractError):
        insert_one(q, 4)


def test_bad_policy_and_capacity():
    with pytest.raises(ConfigError):
        KVQueue(1, 1, 1, 2, "lru")
    with pytest.raises(ConfigError):
        KVQueue(1, 1, 1, 0)


@given(st.sampled_from(POLICIES), st.integers(1, 6), st.lists(st.integers(1, 6), min_size=1, max_size=15),
       st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_capacity_and_id_order_hold(policy, Q, sizes, seed):
    q = KVQueue(2, 2, 3, Q, policy, seed)
    fid = 0
    for g in sizes:
        g = min(g, Q)
        ids = list(range(fid, fid + g))
        fid += g
        k = np.ones((g, 2, 3))
        q.insert_group(ids, [k, k], [k, k])
        assert len(q) <= Q
        assert all(b > a for a, b in zip(q.frame_ids, q.frame_ids[1:]))
        assert q.frame_ids[-g:] == ids          # current group survives its own insertion
        assert all(k.shape[0] == len(q) for k in q.keys + q.values)
        assert q.peak_floats <= 2 * (Q + max(sizes)) * 2 * 3 * 2


@given(st.lists(st.integers(0, 60), min_size=2, max_size=8, unique=True), st.integers(1, 3))
@settings(max_examples=200, deadline=None)
def test_stride_matches_exhaustive_oracle(ids, n_current):
    ids = sorted(ids)
    if n_current >= len(ids):
        return
    assert stride_victim(ids, n_current) == stride_oracle(ids, n_current)


def test_stride_oracle_tie_goes_to_older():
    # removing 2 or 3 from {0, 2, 3, 5} leaves the same gap variance
    assert gap_variance([0, 3, 5]) == gap_variance([0, 2, 5])
    assert stride_oracle([0, 2, 3, 5, 6], 1) == 1
    assert stride_victim([0, 2, 3, 5, 6], 1) == 1


def test_stride_is_deterministic():
    runs = []
    for _ in range(2):
        q = filled("stride", 4, range(12))
        runs.append(list(q.evicted))
    assert runs[0] == runs[1]


def test_random_never_evicts_current_group():
    q = KVQueue(1, 1, 1, 3, "random", seed=5)
    for s in range(0, 30, 2):
        z = np.zeros((2, 1, 1))
        q.insert_group([s, s + 1], [z], [z])
        assert q.frame_ids[-2:] == [s, s + 1]


def test_snapshot_round_trip_bytes():
    q = filled("random", 3, range(7), layers=2, T=2, D=3)
    blob = q.snapshot()
    r = KVQueue.restore(blob, layers=2, tokens_per_frame=2, dim=3)
    assert r.snapshot() == blob
    # the restored rng continues the same eviction stream
    for i in range(7, 12):
        insert_one(q, i)
        insert_one(r, i)
    assert q.frame_ids == r.frame_ids


def test_snapshot_rejects_mismatch_and_corruption():
    blob = filled("fifo", 3, range(4), D=3).snapshot()
    with pytest.raises(FormatError):
        KVQueue.restore(blob, dim=4)
    with pytest.raises(FormatError):
        KVQueue.restore(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        KVQueue.restore(blob[:-5])
    with pytest.raises(FormatError):
        KVQueue.restore(blob + b"\0")


def test_attend_with_empty_cache_is_plain_attention():
    from gar3d.attention import MultiHeadAttention
    from gar3d.numkernel import Tensor
    rng = Rng(0)
    attn = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 5, 8)))
    k, v = attn.keys_values(x)
    out = attend_with_cache(attn, attn.q(x), k, v, (np.zeros((0, 8)), np.zeros((0, 8))))
    assert np.array_equal(out.data, attn(x).data)


# -- model-level cache behaviour ----------------------------------------------
CFG = ModelConfig(layers=2, dim=16, heads=2, patch_size=4, height=8, width=8)


@pytest.fixture(scope="module")
def model():
    m = GroupAutoregressiveModel(CFG)
    rng = Rng(1)
    for p in m.parameters():
        p.data += 0.05 * rng.normal(size=p.shape)
    return m


def frames(n, seed=0):
    rng = Rng(seed)
    return [FrameBundle(rng.random((8, 8))) for _ in range(n)]


def max_diff(a: ModelOutput, b: ModelOutput) -> float:
    return max(float(np.abs(getattr(a, n).data - getattr(b, n).data).max())
               for n in ("local_points", "confidence", "rotation", "translation"))


@pytest.mark.parametrize("policy", POLICIES)
def test_policy_irrelevant_when_capacity_covers_sequence(model, policy):
    fr = frames(6)
    off = model.forward_offline(fr, group_size=2)
    on = ModelOutput.concat(model.forward_online(fr, 2, capacity=6, policy=policy))
    assert max_diff(off, on) < 1e-10


def test_touched_keys_bounded_by_capacity(model):
    T = CFG.tokens_per_frame
    session = model.new_session(3, "fifo")
    for n, f in enumerate(frames(8)):
        out = session.step([f])
        assert out.stats["touched_keys"] == [min(n, 3) * T + T] * CFG.layers


def test_prefill_then_stream_equals_online_with_same_groups(model):
    fr = frames(6)
    hyb = ModelOutput.concat(model.forward_hybrid(fr, 3))
    on = ModelOutput.concat(model.forward_online(fr, group_sizes=[3, 1, 1, 1]))
    assert max_diff(hyb, on) < 1e-10


def test_restored_cache_resumes_identically(model):
    from gar3d.model import OnlineSession
    fr = frames(7)
    a = model.new_session(3, "stride")
    for f in fr[:4]:
        a.step([f])
    q = KVQueue.restore(a.cache.snapshot(), CFG.layers, CFG.tokens_per_frame, CFG.dim)
    b = OnlineSession(model, cache=q)
    for f in fr[4:]:
        assert max_diff(a.step([f]), b.step([f])) == 0.0


def test_restore_into_different_model_dim(model):
    blob = model.new_session(2).cache.snapshot()
    with pytest.raises(FormatError):
        KVQueue.restore(blob, dim=CFG.dim * 2)
