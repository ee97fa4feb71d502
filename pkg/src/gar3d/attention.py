"""Trunk attention: group causal masks, frame/global attention, modal fusion.

Token layout per frame is ``[pose token, patch tokens in row-major order]``.
Global attention flattens all frames of a block into one sequence and
applies the frame-level mask expanded to token level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, ContractError, DimensionError
from .geometry import CameraPose, local_ray_map
from .layers import MLP, LayerNorm, Linear, Module
from .numkernel import Tensor

MAD_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------
def group_ids_for(num_frames: int, group_size: int) -> np.ndarray:
    """0-based group index of each frame for fixed-size groups in arrival order."""
    if group_size < 1:
        raise ContractError(f"group size must be >= 1, got {group_size}")
    return np.arange(num_frames) // group_size


def group_ids_from_sizes(sizes) -> np.ndarray:
    return np.repeat(np.arange(len(sizes)), sizes)


@dataclass(frozen=True)
class AttentionMask:
    """Frame-level visibility: ``allow[i, j]`` lets frame i attend to frame j."""

    allow: np.ndarray

    def token_bias(self, tokens_per_frame: int, dtype=np.float64) -> np.ndarray:
        tok = np.repeat(np.repeat(self.allow, tokens_per_frame, 0), tokens_per_frame, 1)
        return np.where(tok, 0.0, -np.inf).astype(dtype)

    @property
    def all_true(self) -> bool:
        return bool(self.allow.all())


def mask_from_group_ids(group_ids) -> AttentionMask:
    g = np.asarray(group_ids)
    return AttentionMask(g[None, :] <= g[:, None])


def build_group_causal_mask(num_frames: int, group_size: int) -> AttentionMask:
    """Bidirectional inside each group of ``group_size`` frames, causal across groups."""
    return mask_from_group_ids(group_ids_for(num_frames, group_size))


@dataclass
class TokenBlock:
    """Tokens of a set of frames plus their sequence and group indices."""

    tokens: Tensor                     # (frames, tokens_per_frame, dim)
    frame_ids: np.ndarray
    group_ids: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "TokenBlock":
        return TokenBlock(tokens, self.frame_ids, self.group_ids)


# ---------------------------------------------------------------------------
# Attention primitives
# ---------------------------------------------------------------------------
def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, S, D) -> (B, H, S, D/H)."""
    B, S, D = x.shape
    return x.reshape(B, S, heads, D // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, H, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over the last two axes."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = nk.matmul(q, k.swapaxes(-1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    return nk.matmul(nk.softmax_lastdim(scores), v)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float64):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.q = Linear(dim, dim, rng, dtype)
        self.kv = Linear(dim, 2 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def keys_values(self, x: Tensor) -> tuple[Tensor, Tensor]:
        kv = self.kv(x)
        return kv[..., :self.dim], kv[..., self.dim:]

    def __call__(self, x: Tensor, bias=None) -> Tensor:
        k, v = self.keys_values(x)
        return self.attend(self.q(x), k, v, bias)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
        h = self.heads
        o = scaled_dot_attention(split_heads(q, h), split_heads(k, h), split_heads(v, h), bias)
        return self.proj(merge_heads(o))


class FrameAttention(Module):
    """Pre-norm self-attention + MLP restricted to tokens of one frame."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng, dtype)

    def __call__(self, block: TokenBlock) -> TokenBlock:
        x = block.tokens
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return block.with_tokens(x)


class GlobalAttention(Module):
    """Pre-norm attention across all frames of a block, plus MLP.

    Offline, the whole block attends under a frame-level mask. Online, the
    block holds only the current group and attends to previously cached keys
    and values followed by its own; no mask is needed because every cached
    frame belongs to an earlier group.
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng, dtype)

    def __call__(self, block: TokenBlock, mask: AttentionMask | None = None,
                 past_kv=None, counter: dict | None = None):
        """Returns ``(block, (k, v))`` where k, v are this block's (F*T, D) keys/values."""
        F, T, D = block.tokens.shape
        x = block.tokens.reshape(1, F * T, D)
        h = self.norm1(x)
        q = self.attn.q(h)
        k, v = self.attn.keys_values(h)
        if past_kv is not None:
            from .kvcache import attend_with_cache
            if past_kv[0].shape[-1] != D:
                raise ConfigError(f"cached key width {past_kv[0].shape[-1]} != model dim {D}")
            a = attend_with_cache(self.attn, q, k, v, past_kv, counter)
        else:
            bias = None
            if mask is not None:
                if mask.allow.shape != (F, F):
                    raise ConfigError(f"mask {mask.allow.shape} does not match {F} frames")
                if not mask.all_true:
                    bias = mask.token_bias(T, x.dtype)
            if counter is not None:
                counter["keys"] = F * T
            a = self.attn.attend(q, k, v, bias)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        kv = (k.reshape(F * T, D), v.reshape(F * T, D))
        return block.with_tokens(x.reshape(F, T, D)), kv


class ModalAttention(Module):
    """Fuse modal tokens into image tokens at aligned positions.

    Queries come from the image tokens; keys and values come from a learned
    projection of the per-position channel concatenation [image, modal].
    The output projection starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64):
        self.norm_img = LayerNorm(dim, dtype)
        self.norm_mod = LayerNorm(dim, dtype)
        self.fuse = Linear(2 * dim, dim, rng, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype, zero_init=True)

    def __call__(self, image_tokens: Tensor, modal_tokens: Tensor) -> Tensor:
        if image_tokens.shape != modal_tokens.shape:
            raise DimensionError(
                f"modal tokens {modal_tokens.shape} not aligned with image tokens {image_tokens.shape}")
        xi = self.norm_img(image_tokens)
        fused = self.fuse(nk.concat([xi, self.norm_mod(modal_tokens)], axis=-1))
        k, v = self.attn.keys_values(fused)
        return image_tokens + self.out(self.attn.attend(self.attn.q(xi), k, v))


# ---------------------------------------------------------------------------
# Modal encoding
# ---------------------------------------------------------------------------
def sp_normalize(values: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Median shift and mean-absolute-deviation scale over valid entries."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.ones(values.shape, bool) if valid is None else np.asarray(valid, bool)
    out = np.zeros_like(values)
    if not valid.any():
        return out
    sel = values[valid]
    med = np.median(sel)
    mad = max(float(np.mean(np.abs(sel - med))), MAD_FLOOR)
    out[valid] = (sel - med) / mad
    return out


@dataclass
class ModalInputs:
    """Normalized raw modal arrays of one frame, zeros where absent."""

    pixels: np.ndarray          # (H, W, 4): depth + unit ray map
    pose: np.ndarray            # (12,) row-major [R|T]
    has_depth: bool = False
    has_intrinsics: bool = False
    has_extrinsics: bool = False


def modal_inputs(H: int, W: int, depth=None, depth_valid=None, K=None,
                 pose: CameraPose | None = None) -> ModalInputs:
    """Prepare the optional modalities of one frame for encoding.

    A depth map without any valid pixel counts as absent.
    """
    pixels = np.zeros((H, W, 4))
    has_depth = False
    if depth is not None:
        depth = np.asarray(depth, dtype=np.float64)
        valid = depth > 0 if depth_valid is None else np.asarray(depth_valid, bool) & (depth > 0)
        if valid.any():
            pixels[..., 0] = sp_normalize(depth, valid)
            has_depth = True
    if K is not None:
        rays = local_ray_map(K, H, W)
        for c in range(3):
            pixels[..., 1 + c] = sp_normalize(rays[..., c])
    pose_vec = np.zeros(12)
    if pose is not None:
        pose_vec = np.concatenate([pose.R, pose.T[:, None]], axis=1).reshape(-1)
    return ModalInputs(pixels, pose_vec, has_depth, K is not None, pose is not None)


@dataclass
class ModalTokens:
    tokens: Tensor                                   # (frames, tokens_per_frame, dim)
    present: list = field(default_factory=list)      # per frame (depth, intrinsics, extrinsics)


class ModalEncoder(Module):
    """Point tokens (depth + ray map) and pose tokens from two-layer MLPs.

    Pixels pass through the point MLP one by one and are mean-pooled over
    each patch so they line up with the image patch tokens.
    """

    def __init__(self, dim: int, patch: int, rng, dtype=np.float64):
        self.patch = patch
        self.dtype = dtype
        self.point_mlp = MLP(4, dim, dim, rng, dtype)
        self.pose_mlp = MLP(12, dim, dim, rng, dtype)

    def __call__(self, inputs: list) -> ModalTokens:
        p = self.patch
        pix = np.stack([m.pixels for m in inputs]).astype(self.dtype)
        F, H, W, _ = pix.shape
        feats = self.point_mlp(nk.Tensor(pix))
        D = feats.shape[-1]
        pooled = feats.reshape(F, H // p, p, W // p, p, D).mean(axis=(2, 4)).reshape(F, -1, D)
        pose = self.pose_mlp(nk.Tensor(np.stack([m.pose for m in inputs]).astype(self.dtype)))
        tokens = nk.concat([pose.reshape(F, 1, D), pooled], axis=1)
        present = [(m.has_depth, m.has_intrinsics, m.has_extrinsics) for m in inputs]
        return ModalTokens(tokens, present)


def encode_modalities(encoder: ModalEncoder, H: int, W: int, depth=None, K=None,
                      pose: CameraPose | None = None, depth_valid=None) -> ModalTokens:
    """Encode one frame's optional depth, intrinsics and pose."""
    return encoder([modal_inputs(H, W, depth, depth_valid, K, pose)])
