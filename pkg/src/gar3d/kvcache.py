"""Queue-style key/value memory with a fixed frame capacity.

Every global-attention layer keeps the keys and values of past frames. Once
more than ``capacity`` frames are stored, an eviction policy removes whole
frames until the queue fits again, so a step never attends to more than
``capacity + group`` frames regardless of how long the stream runs.

Policies:
    fifo    drop the oldest frame.
    random  drop a uniformly chosen cached frame (never the current group).
    merge   average the two oldest adjacent frames into one entry that keeps
            the older frame id.
    stride  keep the oldest frame as the span anchor and drop the interior
            frame whose removal leaves the most uniform id gaps; ties go to
            the older frame.
"""
from __future__ import annotations

import math
import struct

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, ContractError, FormatError
from .numkernel import Rng, tensor_from_bytes, tensor_to_bytes

POLICIES = ("fifo", "random", "merge", "stride")
SNAPSHOT_MAGIC = b"GKVC"
SNAPSHOT_VERSION = 1
_UNBOUNDED = 0xFFFFFFFFFFFFFFFF


def stride_victim(ids, n_current: int) -> int:
    """Index of the frame STRIDE evicts from sorted ``ids``.

    The last ``n_current`` ids are the group being inserted. With the span
    [oldest, newest] fixed, the gap variance only depends on the sum of
    squared gaps, and removing frame k between neighbours a and b changes
    that sum by ``2 (k - a)(b - k)``; the victim minimises this product.
    """
    n_old = len(ids) - n_current
    if n_old < 1:
        raise ContractError("nothing evictable: cache holds only the current group")
    if n_old == 1:
        return 0
    best, best_score = 1, None
    for k in range(1, n_old):
        score = (ids[k] - ids[k - 1]) * (ids[k + 1] - ids[k])
        if best_score is None or score < best_score:
            best, best_score = k, score
    return best


class KVQueue:
    """Per-layer cached keys/values tagged by frame id.

    Args:
        layers: number of global-attention layers.
        tokens_per_frame: tokens stored per frame.
        dim: key/value width.
        capacity: maximum frames kept after an insertion; ``None`` = unbounded.
        policy: one of :data:`POLICIES`.
        seed: seed for the ``random`` policy.
    """

    def __init__(self, layers: int, tokens_per_frame: int, dim: int, capacity: int | None = None,
                 policy: str = "fifo", seed: int = 0, dtype=np.float64):
        if policy not in POLICIES:
            raise ConfigError(f"unknown eviction policy {policy!r}; expected one of {POLICIES}")
        if capacity is not None and capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.layers = layers
        self.tokens_per_frame = tokens_per_frame
        self.dim = dim
        self.capacity = capacity
        self.policy = policy
        self.rng = Rng(seed)
        self.dtype = np.dtype(dtype)
        self.frame_ids: list[int] = []
        empty = np.zeros((0, tokens_per_frame, dim), dtype=self.dtype)
        self.keys = [empty.copy() for _ in range(layers)]
        self.values = [empty.copy() for _ in range(layers)]
        self.touched_keys = [0] * layers
        self.peak_floats = 0
        self.peak_frames = 0
        self.evicted: list[int] = []

    # -- bookkeeping ----------------------------------------------------------
    def __len__(self) -> int:
        return len(self.frame_ids)

    @property
    def q_limit(self) -> float:
        return math.inf if self.capacity is None else self.capacity

    def resident_floats(self) -> int:
        return sum(k.size + v.size for k, v in zip(self.keys, self.values))

    def _note_peak(self) -> None:
        self.peak_floats = max(self.peak_floats, self.resident_floats())
        self.peak_frames = max(self.peak_frames, len(self.frame_ids))

    def layer_kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Cached (frames * tokens, dim) keys and values of one layer."""
        k, v = self.keys[layer], self.values[layer]
        return k.reshape(-1, self.dim), v.reshape(-1, self.dim)

    # -- insertion and eviction -------------------------------------------------
    def insert_group(self, frame_ids, keys, values) -> list[int]:
        """Append a group's keys/values for every layer and evict down to capacity.

        Args:
            frame_ids: ids of the group's frames, newer than anything cached.
            keys, values: per layer, arrays of shape (G, tokens, dim) or
                (G * tokens, dim).

        Returns:
            Frame ids removed (for ``merge``, the newer id of each merged pair).
        """
        frame_ids = [int(i) for i in frame_ids]
        G = len(frame_ids)
        if G == 0:
            return []
        if G > self.q_limit:
            raise ContractError(f"group of {G} frames exceeds queue capacity {self.capacity}")
        if any(b <= a for a, b in zip(frame_ids, frame_ids[1:])) or \
                (self.frame_ids and frame_ids[0] <= self.frame_ids[-1]):
            raise ContractError(f"frame ids {frame_ids} are not newer than cached {self.frame_ids[-1:]}")
        if len(keys) != self.layers or len(values) != self.layers:
            raise ConfigError(f"expected keys/values for {self.layers} layers")
        shape = (G, self.tokens_per_frame, self.dim)
        for l in range(self.layers):
            k = np.asarray(keys[l], dtype=self.dtype)
            v = np.asarray(values[l], dtype=self.dtype)
            if k.size != np.prod(shape) or v.size != np.prod(shape) or k.shape[-1] != self.dim:
                raise ConfigError(f"layer {l}: key/value shape {k.shape} incompatible with {shape}")
            self.keys[l] = np.concatenate([self.keys[l], k.reshape(shape)])
            self.values[l] = np.concatenate([self.values[l], v.reshape(shape)])
        self.frame_ids.extend(frame_ids)
        self._note_peak()
        removed = []
        while len(self.frame_ids) > self.q_limit:
            removed.append(self._evict_one(G))
        self.evicted.extend(removed)
        return removed

    def _drop(self, idx: int) -> int:
        fid = self.frame_ids.pop(idx)
        for l in range(self.layers):
            self.keys[l] = np.delete(self.keys[l], idx, axis=0)
            self.values[l] = np.delete(self.values[l], idx, axis=0)
        return fid

    def _evict_one(self, n_current: int) -> int:
        n_old = len(self.frame_ids) - n_current
        if self.policy == "fifo" or n_old == 1:
            return self._drop(0)
        if self.policy == "random":
            return self._drop(int(self.rng.integers(0, n_old)))
        if self.policy == "stride":
            return self._drop(stride_victim(self.frame_ids, n_current))
        # merge: the two oldest entries become their elementwise mean
        for l in range(self.layers):
            self.keys[l][0] = 0.5 * (self.keys[l][0] + self.keys[l][1])
            self.values[l][0] = 0.5 * (self.values[l][0] + self.values[l][1])
        return self._drop(1)

    # -- persistence ----------------------------------------------------------
    def _header(self) -> bytes:
        cap = _UNBOUNDED if self.capacity is None else self.capacity
        return SNAPSHOT_MAGIC + struct.pack(
            "<IIIIQI", SNAPSHOT_VERSION, self.dim, self.layers, self.tokens_per_frame,
            cap, POLICIES.index(self.policy))

    def snapshot(self) -> bytes:
        """Serialize ids, rng state and all per-layer entries."""
        parts = [self._header(), self.rng.to_bytes(),
                 tensor_to_bytes(np.asarray(self.frame_ids, dtype=np.int64))]
        for k, v in zip(self.keys, self.values):
            parts.append(tensor_to_bytes(k))
            parts.append(tensor_to_bytes(v))
        return b"".join(parts)

    @classmethod
    def restore(cls, blob: bytes, layers: int | None = None, tokens_per_frame: int | None = None,
                dim: int | None = None) -> "KVQueue":
        """Rebuild a queue from :meth:`snapshot` bytes.

        The optional arguments describe the model that will consume the
        queue; any disagreement with the stored digest is a format error.
        """
        head = struct.calcsize("<IIIIQI")
        if blob[:4] != SNAPSHOT_MAGIC:
            raise FormatError("not a KV-cache snapshot (bad magic)")
        try:
            version, s_dim, s_layers, s_tpf, cap, tag = struct.unpack_from("<IIIIQI", blob, 4)
        except struct.error:
            raise FormatError("truncated KV-cache snapshot header") from None
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported KV-cache snapshot version {version}")
        for name, want, got in (("layers", layers, s_layers), ("tokens_per_frame", tokens_per_frame, s_tpf),
                                ("dim", dim, s_dim)):
            if want is not None and want != got:
                raise FormatError(f"snapshot {name}={got} does not match model {name}={want}")
        if tag >= len(POLICIES):
            raise FormatError(f"unknown policy tag {tag}")
        pos = 4 + head
        rng = Rng.from_bytes(blob[pos:pos + 52])
        pos += 52
        ids, pos = tensor_from_bytes(blob, pos)
        q = cls(s_layers, s_tpf, s_dim, None if cap == _UNBOUNDED else cap, POLICIES[tag])
        q.rng = rng
        q.frame_ids = [int(i) for i in ids]
        for l in range(s_layers):
            q.keys[l], pos = tensor_from_bytes(blob, pos)
            q.values[l], pos = tensor_from_bytes(blob, pos)
            if q.keys[l].shape != (len(ids), s_tpf, s_dim):
                raise FormatError(f"layer {l} entries have shape {q.keys[l].shape}")
        if pos != len(blob):
            raise FormatError("trailing bytes in KV-cache snapshot")
        q.dtype = q.keys[0].dtype if s_layers else q.dtype
        q._note_peak()
        return q


def attend_with_cache(attn, q, k_cur, v_cur, past_kv, counter: dict | None = None):
    """Attention of current queries over cached keys/values followed by current ones.

    Args:
        attn: the layer's :class:`~gar3d.attention.MultiHeadAttention`.
        q, k_cur, v_cur: (1, S, D) projections of the current group.
        past_kv: ``(K, V)`` arrays of shape (n * tokens, D) from the cache.
        counter: if given, ``counter["keys"]`` receives the number of keys used.
    """
    K_past, V_past = past_kv
    if K_past.shape[-1] != k_cur.shape[-1] or V_past.shape[-1] != v_cur.shape[-1]:
        raise ConfigError(f"cached width {K_past.shape[-1]} != current width {k_cur.shape[-1]}")
    if K_past.shape[0]:
        k = nk.concat([nk.Tensor(K_past[None].astype(k_cur.dtype, copy=False)), k_cur], axis=1)
        v = nk.concat([nk.Tensor(V_past[None].astype(v_cur.dtype, copy=False)), v_cur], axis=1)
    else:
        k, v = k_cur, v_cur
    if counter is not None:
        counter["keys"] = k.shape[1]
    return attn.attend(q, k, v)
