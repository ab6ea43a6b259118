"""Frozen toy image encoder and frame utilities.

A small pre-norm vision transformer with seeded Gaussian weights stands in
for a pretrained image encoder. It is read-only after construction: frames
are encoded independently (batch-of-images semantics) and no gradients flow
into it. Videos enter and leave the pipeline as VTNS files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    ensure_finite,
    gelu_fwd,
    layer_norm_fwd,
    softmax_rows_fwd,
    tensor_sha256,
)
from .vtns import read_tensor, write_tensor

WEIGHT_STD = 0.02


def param_rng(seed: int, name: str) -> np.random.Generator:
    """RNG keyed by (seed, parameter name) so resizing one table never shifts others."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.num_patches < 4:
            raise ValueError("need a patch grid of at least 2x2")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2


@dataclass
class VideoTensor:
    """Sampled frames, shape (T, H, W, 3), values in [0, 1]."""

    frames: Tensor
    source_id: str = ""

    def __post_init__(self):
        f = self.frames.data
        if f.ndim != 4 or f.shape[3] != 3 or f.shape[0] < 1:
            raise ValueError(f"expected (T, H, W, 3) frames, got {f.shape}")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.data.shape[0]


@dataclass
class FrameEmbeddings:
    """Per-frame encoder output, shape (T, N, D)."""

    x: Tensor

    def __post_init__(self):
        if self.x.data.ndim != 3:
            raise ValueError(f"expected (T, N, D), got {self.x.data.shape}")


def sample_frames(raw: VideoTensor, count: int) -> VideoTensor:
    """Uniform frame selection: idx_i = round(i * (F-1) / (T-1)).

    Deterministic; repeats indices when count exceeds the source length.
    """
    frames = raw.frames.data
    total = frames.shape[0]
    if count < 1:
        raise ValueError("frame count must be >= 1")
    if count == 1 or total == 1:
        idx = np.zeros(count, dtype=np.int64)
    else:
        grid = np.arange(count, dtype=np.float64) * (total - 1) / (count - 1)
        idx = np.floor(grid + 0.5).astype(np.int64)
    return VideoTensor(Tensor(frames[idx].copy()), source_id=raw.source_id)


class ImageEncoder:
    """Pre-norm ViT over non-overlapping patches, weights frozen at construction."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        d = cfg.embed_dim
        patch_in = cfg.patch_size * cfg.patch_size * 3

        def gauss(name, shape):
            return param_rng(cfg.seed, f"enc.{name}").normal(0.0, WEIGHT_STD, shape)

        w = {
            "patch_w": gauss("patch_w", (patch_in, d)),
            "patch_b": gauss("patch_b", (d,)),
            "pos": gauss("pos", (cfg.num_patches, d)),
            "lnf_g": 1.0 + gauss("lnf_g", (d,)),
            "lnf_b": gauss("lnf_b", (d,)),
        }
        for i in range(cfg.num_layers):
            for nm in ("wq", "wk", "wv", "wo"):
                w[f"l{i}.{nm}"] = gauss(f"l{i}.{nm}", (d, d))
                w[f"l{i}.{nm}_b"] = gauss(f"l{i}.{nm}_b", (d,))
            w[f"l{i}.mlp_w1"] = gauss(f"l{i}.mlp_w1", (d, 4 * d))
            w[f"l{i}.mlp_b1"] = gauss(f"l{i}.mlp_b1", (4 * d,))
            w[f"l{i}.mlp_w2"] = gauss(f"l{i}.mlp_w2", (4 * d, d))
            w[f"l{i}.mlp_b2"] = gauss(f"l{i}.mlp_b2", (d,))
            w[f"l{i}.ln1_g"] = 1.0 + gauss(f"l{i}.ln1_g", (d,))
            w[f"l{i}.ln1_b"] = gauss(f"l{i}.ln1_b", (d,))
            w[f"l{i}.ln2_g"] = 1.0 + gauss(f"l{i}.ln2_g", (d,))
            w[f"l{i}.ln2_b"] = gauss(f"l{i}.ln2_b", (d,))
        for arr in w.values():
            arr.setflags(write=False)
        self.weights = w

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(tensor_sha256(self.weights[name]).encode())
        return h.hexdigest()

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        """(T, H, W, 3) -> (T, N, P*P*3), patches in row-major grid order."""
        t = frames.shape[0]
        g, p = self.cfg.grid_side, self.cfg.patch_size
        x = frames.reshape(t, g, p, g, p, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(t, g * g, p * p * 3)

    def _attention(self, h: np.ndarray, layer: int) -> np.ndarray:
        """Full (non-causal) self-attention within each frame; h is (T, N, D)."""
        w = self.weights
        nh = self.cfg.num_heads
        t, n, d = h.shape
        dh = d // nh
        q = (h @ w[f"l{layer}.wq"] + w[f"l{layer}.wq_b"]).reshape(t, n, nh, dh)
        k = (h @ w[f"l{layer}.wk"] + w[f"l{layer}.wk_b"]).reshape(t, n, nh, dh)
        v = (h @ w[f"l{layer}.wv"] + w[f"l{layer}.wv_b"]).reshape(t, n, nh, dh)
        scores = np.einsum("tihd,tjhd->thij", q, k) / np.sqrt(dh)
        att = softmax_rows_fwd(scores)
        ctx = np.einsum("thij,tjhd->tihd", att, v).reshape(t, n, d)
        return ctx @ w[f"l{layer}.wo"] + w[f"l{layer}.wo_b"]

    def encode(self, video: VideoTensor) -> FrameEmbeddings:
        """Encode each frame independently; output row i depends only on frame i."""
        cfg = self.cfg
        frames = video.frames.data
        if frames.shape[1] != cfg.image_size or frames.shape[2] != cfg.image_size:
            raise ValueError(
                f"frame size {frames.shape[1]}x{frames.shape[2]} does not match "
                f"encoder image_size {cfg.image_size}"
            )
        w = self.weights
        x = self._patchify(frames) @ w["patch_w"] + w["patch_b"] + w["pos"]
        for i in range(cfg.num_layers):
            h, _ = layer_norm_fwd(x, w[f"l{i}.ln1_g"], w[f"l{i}.ln1_b"], 1e-5)
            x = x + self._attention(h, i)
            h, _ = layer_norm_fwd(x, w[f"l{i}.ln2_g"], w[f"l{i}.ln2_b"], 1e-5)
            u = h @ w[f"l{i}.mlp_w1"] + w[f"l{i}.mlp_b1"]
            x = x + gelu_fwd(u) @ w[f"l{i}.mlp_w2"] + w[f"l{i}.mlp_b2"]
        out, _ = layer_norm_fwd(x, w["lnf_g"], w["lnf_b"], 1e-5)
        ensure_finite(out, "encoder output")
        return FrameEmbeddings(Tensor(out))


def encode_frames(video: VideoTensor, cfg: EncoderConfig) -> FrameEmbeddings:
    return ImageEncoder(cfg).encode(video)


# -------------------- VTNS loaders --------------------


def load_video(path: str | Path, source_id: str | None = None) -> VideoTensor:
    """Read a rank-4 (T, H, W, 3) VTNS video."""
    arr = read_tensor(path, expect_rank=4)
    return VideoTensor(Tensor(arr), source_id=source_id or str(path))


def save_video(path: str | Path, video: VideoTensor) -> None:
    write_tensor(path, video.frames.data)


def load_features(path: str | Path) -> FrameEmbeddings:
    """Read precomputed rank-3 (T, N, D) frame features."""
    return FrameEmbeddings(Tensor(read_tensor(path, expect_rank=3)))


def save_features(path: str | Path, feats: FrameEmbeddings) -> None:
    write_tensor(path, feats.x.data)
