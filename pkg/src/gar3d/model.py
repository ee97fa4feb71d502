"""End-to-end point-map network and its offline / online / hybrid inference.

One trunk layer is: optional modal attention (at staged layers), frame
attention, then global attention. Offline inference runs global attention
over all frames under a group causal mask; online inference feeds one group
per step and replaces the masked frames by a bounded key/value queue.
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .attention import (
    AttentionMask,
    FrameAttention,
    GlobalAttention,
    ModalAttention,
    ModalEncoder,
    TokenBlock,
    build_group_causal_mask,
    group_ids_from_sizes,
    mask_from_group_ids,
    modal_inputs,
)
from .errors import ConfigError, ContractError, FormatError
from .geometry import CameraPose, orthogonalize, transform_points, relative_pose
from .kvcache import KVQueue
from .layers import LayerNorm, Linear, Module, param
from .numkernel import Rng, Tensor, tensor_from_bytes, tensor_to_bytes

CHECKPOINT_MAGIC = b"GARG"
CHECKPOINT_VERSION = 1
REFERENCE_STAGES = (0, 5, 12, 18)
REFERENCE_DEPTH = 24


def proportional_stages(layers: int) -> tuple:
    """Map the 24-layer stage placement onto ``layers`` layers."""
    idx = {min(layers - 1, int(np.floor(s * layers / REFERENCE_DEPTH + 0.5))) for s in REFERENCE_STAGES}
    return tuple(sorted(idx))


@dataclass
class ModelConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    patch_size: int = 8
    height: int = 32
    width: int = 32
    modal_stages: tuple = ()
    mlp_ratio: int = 4
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not self.modal_stages:
            self.modal_stages = proportional_stages(self.layers)
        self.modal_stages = tuple(int(s) for s in self.modal_stages)
        self.validate()

    def validate(self) -> None:
        if self.layers < 1 or self.dim < 1 or self.heads < 1:
            raise ConfigError("layers, dim and heads must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by patch {self.patch_size}")
        st = self.modal_stages
        if list(st) != sorted(set(st)) or st[0] != 0 or st[-1] >= self.layers:
            raise ConfigError(f"modal stages {st} must be sorted, unique, start at 0 and lie in [0, {self.layers})")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def tokens_per_frame(self) -> int:
        return self.num_patches + 1

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            if key not in types:
                raise FormatError(f"unknown config key {key!r}")
            if key == "modal_stages":
                kw[key] = tuple(int(x) for x in val.split(",") if x)
            elif key == "dtype":
                kw[key] = val
            else:
                kw[key] = int(val)
        return cls(**kw)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()


NOMINAL_FOV_DEG = 60.0


def nominal_point_bias(c: ModelConfig) -> np.ndarray:
    """Per-patch decode bias: a unit-depth plane along nominal pixel rays, raw confidence 0."""
    f = 0.5 * c.width / np.tan(np.deg2rad(NOMINAL_FOV_DEG) / 2)
    vv, uu = np.mgrid[0:c.height, 0:c.width] + 0.5
    pix = np.stack([(uu - c.width / 2) / f, (vv - c.height / 2) / f, np.ones_like(uu), np.zeros_like(uu)], -1)
    p = c.patch_size
    pix = pix.reshape(c.height // p, p, c.width // p, p, 4).transpose(0, 2, 1, 3, 4)
    return pix.reshape(c.num_patches, p * p * 4)


@dataclass
class FrameBundle:
    """One observation: grayscale image plus optional depth, intrinsics, pose."""

    image: np.ndarray
    depth: np.ndarray | None = None
    depth_valid: np.ndarray | None = None
    K: np.ndarray | None = None
    pose: CameraPose | None = None
    frame_id: int | None = None


@dataclass
class ModelOutput:
    """Per-frame predictions; tensors keep their tape when produced with grad."""

    local_points: Tensor        # (F, H, W, 3)
    confidence: Tensor          # (F, H, W), >= 1
    raw_rotation: Tensor        # (F, 3, 3)
    rotation: Tensor            # (F, 3, 3)
    translation: Tensor         # (F, 3)
    frame_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.local_points.shape[0]

    def poses(self) -> list:
        return [CameraPose(self.rotation.data[i].copy(), self.translation.data[i].copy())
                for i in range(len(self))]

    def depth(self) -> np.ndarray:
        return self.local_points.data[..., 2]

    def global_points(self, anchor_index: int = 0) -> np.ndarray:
        """Point maps in the anchor camera's frame via relative poses."""
        poses = self.poses()
        anchor = poses[anchor_index]
        out = []
        for i, pose in enumerate(poses):
            rel = relative_pose(anchor, pose)
            out.append(transform_points(rel.R, rel.T, self.local_points.data[i]))
        return np.stack(out)

    @staticmethod
    def concat(outputs: list) -> "ModelOutput":
        with nk.no_grad():
            cat = lambda name: nk.concat([getattr(o, name) for o in outputs])
            return ModelOutput(cat("local_points"), cat("confidence"), cat("raw_rotation"),
                               cat("rotation"), cat("translation"),
                               np.concatenate([o.frame_ids for o in outputs]))


class GroupAutoregressiveModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        dt = c.np_dtype
        rng = Rng(c.seed)
        p = c.patch_size
        self.patch_embed = Linear(p * p, c.dim, rng, dt)
        self.pos_embed = param(rng.normal(0.0, 0.02, (c.num_patches, c.dim)), dt)
        self.pose_token = param(rng.normal(0.0, 0.02, (c.dim,)), dt)
        self.modal_encoder = ModalEncoder(c.dim, p, rng, dt)
        self.modal_layers = [ModalAttention(c.dim, c.heads, rng, dt) for _ in c.modal_stages]
        self.frame_layers = [FrameAttention(c.dim, c.heads, rng, dt, c.mlp_ratio) for _ in range(c.layers)]
        self.global_layers = [GlobalAttention(c.dim, c.heads, rng, dt, c.mlp_ratio) for _ in range(c.layers)]
        self.final_norm = LayerNorm(c.dim, dt)
        self.point_head = Linear(c.dim, p * p * 4, rng, dt)
        self.point_head.weight.data *= 0.1
        self.point_bias = param(nominal_point_bias(c), dt)
        self.camera_head = Linear(c.dim, 12, rng, dt)
        self.camera_head.weight.data *= 0.1
        self.camera_head.bias.data[:] = np.concatenate([np.eye(3).reshape(-1), np.zeros(3)])
        self._stage_of = {layer: i for i, layer in enumerate(c.modal_stages)}

    # -- pieces ---------------------------------------------------------------
    def _check_frames(self, frames) -> None:
        if not frames:
            raise ContractError("at least one frame is required")
        H, W = self.config.height, self.config.width
        for f in frames:
            if np.asarray(f.image).shape[:2] != (H, W):
                raise ContractError(f"frame image {np.asarray(f.image).shape} != model resolution {(H, W)}")

    def embed(self, frames) -> Tensor:
        c = self.config
        p, dt = c.patch_size, c.np_dtype
        imgs = np.stack([np.asarray(f.image, dtype=np.float64).reshape(c.height, c.width) for f in frames])
        F = len(frames)
        patches = imgs.reshape(F, c.height // p, p, c.width // p, p).transpose(0, 1, 3, 2, 4)
        patches = (patches.reshape(F, c.num_patches, p * p) - 0.5).astype(dt)
        tok = self.patch_embed(Tensor(patches)) + self.pos_embed
        pose = nk.broadcast_to(self.pose_token.reshape(1, 1, c.dim), (F, 1, c.dim))
        return nk.concat([pose, tok], axis=1)

    def encode_modal(self, frames) -> Tensor:
        c = self.config
        inputs = [modal_inputs(c.height, c.width, f.depth, f.depth_valid, f.K, f.pose) for f in frames]
        return self.modal_encoder(inputs).tokens

    def trunk(self, block: TokenBlock, modal: Tensor, mask: AttentionMask | None = None,
              cache: KVQueue | None = None, counters: list | None = None):
        """Run all layers; returns the final block and per-layer (K, V) of the block."""
        kvs = []
        for l in range(self.config.layers):
            if l in self._stage_of:
                block = block.with_tokens(self.modal_layers[self._stage_of[l]](block.tokens, modal))
            block = self.frame_layers[l](block)
            counter = counters[l] if counters is not None else None
            past = cache.layer_kv(l) if cache is not None else None
            block, kv = self.global_layers[l](block, mask, past, counter)
            kvs.append(kv)
        return block, kvs

    def camera_head_forward(self, pose_features: Tensor):
        """Single-pass camera head: 9 raw rotation entries and a translation."""
        raw = self.camera_head(pose_features)
        F = raw.shape[0]
        return raw[:, :9].reshape(F, 3, 3), raw[:, 9:]

    def decode_head(self, patch_features: Tensor):
        """Per-patch linear unfold to local points and confidence ``1 + exp(raw)``."""
        c = self.config
        p = c.patch_size
        F = patch_features.shape[0]
        out = self.point_head(patch_features) + self.point_bias
        out = out.reshape(F, c.height // p, c.width // p, p, p, 4).transpose(0, 1, 3, 2, 4, 5)
        out = out.reshape(F, c.height, c.width, 4)
        return out[..., :3], nk.exp(out[..., 3]) + 1.0

    def heads(self, block: TokenBlock) -> ModelOutput:
        h = self.final_norm(block.tokens)
        raw_rot, trans = self.camera_head_forward(h[:, 0, :])
        points, conf = self.decode_head(h[:, 1:, :])
        return ModelOutput(points, conf, raw_rot, orthogonalize(raw_rot), trans,
                           np.asarray(block.frame_ids))

    # -- inference modes ---------------------------------------------------------
    def forward_offline(self, frames, group_size: int | None = None, group_ids=None,
                        capture_kv: bool = False):
        """Single pass over all frames under a group causal mask.

        ``group_size`` defaults to the number of frames (no masking). Pass
        ``group_ids`` instead for irregular group schedules. With
        ``capture_kv`` the per-layer keys/values are returned too.
        """
        self._check_frames(frames)
        N = len(frames)
        if group_ids is not None:
            mask = mask_from_group_ids(group_ids)
            gids = np.asarray(group_ids)
        else:
            mask = build_group_causal_mask(N, N if group_size is None else group_size)
            gids = np.arange(N) // (N if group_size is None else group_size)
        ids = np.array([i if f.frame_id is None else f.frame_id for i, f in enumerate(frames)])
        block = TokenBlock(self.embed(frames), ids, gids)
        block, kvs = self.trunk(block, self.encode_modal(frames), mask)
        out = self.heads(block)
        return (out, kvs) if capture_kv else out

    def new_session(self, capacity: int | None = None, policy: str = "fifo", seed: int = 0) -> "OnlineSession":
        return OnlineSession(self, capacity, policy, seed)

    def forward_online(self, frames, group_size: int = 1, capacity: int | None = None,
                       policy: str = "fifo", seed: int = 0, group_sizes=None) -> list:
        """Stream ``frames`` in groups; one :class:`ModelOutput` per step."""
        self._check_frames(frames)
        sizes = list(group_sizes) if group_sizes is not None else _chunk_sizes(len(frames), group_size)
        if capacity is not None and max(sizes) > capacity:
            raise ContractError(f"group size {max(sizes)} exceeds queue capacity {capacity}")
        session = self.new_session(capacity, policy, seed)
        outs, start = [], 0
        for g in sizes:
            outs.append(session.step(frames[start:start + g]))
            start += g
        return outs

    def forward_hybrid(self, frames, prefill_count: int, capacity: int | None = None,
                       policy: str = "fifo", seed: int = 0, group_size: int = 1) -> list:
        """Offline pass over the first ``prefill_count`` frames, then stream the rest.

        The offline pass fills the queue with its keys/values, so the online
        continuation attends to it as cached memory.
        """
        self._check_frames(frames)
        if capacity is not None and prefill_count > capacity:
            raise ContractError(f"prefill of {prefill_count} frames exceeds queue capacity {capacity}")
        session = self.new_session(capacity, policy, seed)
        outs = []
        if prefill_count:
            outs.append(session.prefill(frames[:prefill_count]))
        rest = frames[prefill_count:]
        for start in range(0, len(rest), group_size):
            outs.append(session.step(rest[start:start + group_size]))
        return outs


def _chunk_sizes(n: int, g: int) -> list:
    if g < 1:
        raise ContractError(f"group size must be >= 1, got {g}")
    return [min(g, n - s) for s in range(0, n, g)]


class OnlineSession:
    """Stateful streaming inference with one queue shared by all layers."""

    def __init__(self, model: GroupAutoregressiveModel, capacity: int | None = None,
                 policy: str = "fifo", seed: int = 0, cache: KVQueue | None = None):
        c = model.config
        self.model = model
        self.cache = cache if cache is not None else KVQueue(
            c.layers, c.tokens_per_frame, c.dim, capacity, policy, seed, c.np_dtype)
        if (self.cache.layers, self.cache.tokens_per_frame, self.cache.dim) != (c.layers, c.tokens_per_frame, c.dim):
            raise ConfigError("cache layout does not match the model")
        self.next_id = self.cache.frame_ids[-1] + 1 if len(self.cache) else 0
        self.history: list = []

    def _ids(self, frames) -> list:
        ids = []
        for f in frames:
            fid = self.next_id if f.frame_id is None else int(f.frame_id)
            ids.append(fid)
            self.next_id = fid + 1
        return ids

    def _record(self, out: ModelOutput, counters) -> None:
        out.stats = {
            "touched_keys": [c.get("keys", 0) for c in counters],
            "cache_frames": len(self.cache),
            "peak_cache_frames": self.cache.peak_frames,
            "peak_kv_floats": self.cache.peak_floats,
        }
        self.history.append(out.stats)

    def prefill(self, frames) -> ModelOutput:
        """Offline pass over ``frames`` as one group, caching its keys/values."""
        if len(self.cache):
            raise ContractError("prefill requires an empty cache")
        if len(frames) > self.cache.q_limit:
            raise ContractError(f"prefill of {len(frames)} frames exceeds queue capacity {self.cache.capacity}")
        ids = self._ids(frames)
        framed = [_with_id(f, i) for f, i in zip(frames, ids)]
        out, kvs = self.model.forward_offline(framed, capture_kv=True)
        G = len(frames)
        self.cache.insert_group(ids, [k.data for k, _ in kvs], [v.data for _, v in kvs])
        self._record(out, [{"keys": G * self.model.config.tokens_per_frame} for _ in kvs])
        return out

    def step(self, frames) -> ModelOutput:
        """Process one group of frames against the cached memory."""
        m = self.model
        m._check_frames(frames)
        if len(frames) > self.cache.q_limit:
            raise ContractError(f"group of {len(frames)} frames exceeds queue capacity {self.cache.capacity}")
        ids = self._ids(frames)
        block = TokenBlock(m.embed(frames), np.asarray(ids), np.zeros(len(ids), int))
        counters = [{} for _ in range(m.config.layers)]
        block, kvs = m.trunk(block, m.encode_modal(frames), None, self.cache, counters)
        out = m.heads(block)
        self.cache.insert_group(ids, [k.data for k, _ in kvs], [v.data for _, v in kvs])
        self._record(out, counters)
        return out


def _with_id(frame: FrameBundle, fid: int) -> FrameBundle:
    return FrameBundle(frame.image, frame.depth, frame.depth_valid, frame.K, frame.pose, fid)


def hybrid_group_ids(n_frames: int, prefill_count: int, group_size: int = 1) -> np.ndarray:
    """Group schedule equivalent to a hybrid run: one prefill group, then fixed groups."""
    sizes = [prefill_count] if prefill_count else []
    if n_frames > prefill_count:
        sizes += _chunk_sizes(n_frames - prefill_count, group_size)
    return group_ids_from_sizes(sizes)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(model: GroupAutoregressiveModel, path) -> None:
    text = model.config.to_text().encode()
    params = model.named_parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(text)), text,
             hashlib.sha256(text).digest(), struct.pack("<I", len(params))]
    for name, p in params.items():
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, tensor_to_bytes(p.data)]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected: ModelConfig | None = None) -> GroupAutoregressiveModel:
    """Rebuild a model from a checkpoint file.

    Raises:
        FormatError: bad magic, truncation, digest mismatch, or a config that
            differs from ``expected``.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n_text = struct.unpack_from("<II", buf, 4)
        pos = 12
        text = buf[pos:pos + n_text]
        pos += n_text
        digest = buf[pos:pos + 32]
        pos += 32
        (n_params,) = struct.unpack_from("<I", buf, pos)
        pos += 4
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint header") from None
    if len(text) != n_text or hashlib.sha256(text).digest() != digest:
        raise FormatError(f"{path}: config digest mismatch")
    if version != CHECKPOINT_VERSION:
        warnings.warn(f"checkpoint version {version} differs from {CHECKPOINT_VERSION}; "
                      "loading with the current layout", stacklevel=2)
    config = ModelConfig.from_text(text.decode())
    if expected is not None and expected.digest() != config.digest():
        raise FormatError(f"{path}: checkpoint config does not match the requested model config")
    model = GroupAutoregressiveModel(config)
    params = model.named_parameters()
    if n_params != len(params):
        raise FormatError(f"{path}: {n_params} parameters stored, model has {len(params)}")
    for _ in range(n_params):
        try:
            (n_name,) = struct.unpack_from("<I", buf, pos)
        except struct.error:
            raise FormatError(f"{path}: truncated parameter table") from None
        pos += 4
        name = buf[pos:pos + n_name].decode(errors="replace")
        pos += n_name
        arr, pos = tensor_from_bytes(buf, pos)
        if name not in params or params[name].shape != arr.shape:
            raise FormatError(f"{path}: unexpected parameter {name} {arr.shape}")
        params[name].data = arr.astype(config.np_dtype)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after parameter table")
    return model
