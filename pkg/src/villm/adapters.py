"""Trainable alignment adapters between encoder features and decoder space.

Two single-affine projections: the spatial alignment module maps the
time-pooled patch tokens, and the temporal module -- initialized as an exact
parameter copy of the spatial one -- maps the patch-pooled per-frame tokens.
Their outputs fuse by row concatenation, temporal tokens first. An optional
randomly-initialized MLP can be composed behind an adapter for the
extra-parameters ablation; it never appears in the default pipeline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import param_rng
from .tensor import ShapeError, Tensor, gelu_bwd, gelu_fwd, tensor_sha256
from .vtns import read_tensor, write_tensor

SPATIAL = "spatial"
TEMPORAL = "temporal"


class AlignmentModule:
    """Rowwise affine map x @ W + b from encoder dim D to decoder dim K."""

    def __init__(self, weight: Tensor, bias: Tensor, label: str):
        if label not in (SPATIAL, TEMPORAL):
            raise ValueError(f"unknown adapter label {label!r}")
        if weight.data.ndim != 2 or bias.data.shape != (weight.data.shape[1],):
            raise ShapeError(
                f"weight {weight.dims} and bias {bias.dims} are inconsistent"
            )
        self.weight = weight
        self.bias = bias
        self.label = label

    @classmethod
    def seeded(cls, in_dim: int, out_dim: int, label: str, seed: int,
               std: float = 0.02) -> "AlignmentModule":
        rng = param_rng(seed, f"adapter.{label}")
        return cls(
            Tensor(rng.normal(0.0, std, (in_dim, out_dim)), requires_grad=True),
            Tensor(rng.normal(0.0, std, (out_dim,)), requires_grad=True),
            label,
        )

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.data.shape[1]

    def forward(self, x: np.ndarray):
        """(R, D) -> ((R, K), cache)."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"adapter expects (R, {self.in_dim}), got {x.shape}")
        return x @ self.weight.data + self.bias.data, x

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        """Accumulate dW, db; return dx."""
        x = cache
        self.weight.accumulate_grad(x.T @ dout)
        self.bias.accumulate_grad(dout.sum(axis=0))
        return dout @ self.weight.data.T

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        h.update(tensor_sha256(self.weight.data).encode())
        h.update(tensor_sha256(self.bias.data).encode())
        return h.hexdigest()


def align_spatial(z: Tensor, g_z: AlignmentModule) -> Tensor:
    if g_z.label != SPATIAL:
        raise ValueError(f"align_spatial needs a spatial module, got {g_z.label!r}")
    y, _ = g_z.forward(z.data)
    return Tensor(y)


def align_temporal(t: Tensor, g_t: AlignmentModule) -> Tensor:
    if g_t.label != TEMPORAL:
        raise ValueError(f"align_temporal needs a temporal module, got {g_t.label!r}")
    y, _ = g_t.forward(t.data)
    return Tensor(y)


def init_temporal_from_alignment(g_z: AlignmentModule) -> AlignmentModule:
    """Deep-copy the alignment parameters into an independent temporal module."""
    return AlignmentModule(
        Tensor(g_z.weight.data.copy(), requires_grad=True),
        Tensor(g_z.bias.data.copy(), requires_grad=True),
        TEMPORAL,
    )


def rms_rows_fwd(x: np.ndarray, eps: float = 1e-8):
    """Scale each row to unit RMS; returns (y, cache).

    Applied to aligned video tokens at the splice boundary so that only the
    row *direction* carries information: adapter weight growth is loss-neutral
    and the rows enter the decoder at text-embedding scale.
    """
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x / r, (x, r)


def rms_rows_bwd(dy: np.ndarray, cache) -> np.ndarray:
    x, r = cache
    n = x.shape[-1]
    return dy / r - x * ((dy * x).sum(axis=-1, keepdims=True) / (n * r ** 3))


def fuse(q_t: np.ndarray | Tensor, q_z: np.ndarray | Tensor) -> Tensor:
    """Row-concatenate aligned tokens, temporal first: (T+N, K)."""
    a = q_t.data if isinstance(q_t, Tensor) else np.asarray(q_t, dtype=np.float64)
    b = q_z.data if isinstance(q_z, Tensor) else np.asarray(q_z, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot fuse token widths {a.shape} and {b.shape}")
    return Tensor(np.concatenate([a, b], axis=0))


@dataclass
class VideoTokens:
    q_t: Tensor  # (T, K)
    q_z: Tensor  # (N, K)
    q_v: Tensor  # (T+N, K), rows [q_t; q_z]


def make_video_tokens(q_t: Tensor, q_z: Tensor) -> VideoTokens:
    return VideoTokens(q_t=q_t, q_z=q_z, q_v=fuse(q_t, q_z))


class ExtraMlp:
    """One affine layer plus nonlinearity, used only by the ablation sweep."""

    def __init__(self, weight: Tensor, bias: Tensor, nonlinearity: str = "gelu"):
        if nonlinearity not in ("gelu", "identity"):
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.weight = weight
        self.bias = bias
        self.nonlinearity = nonlinearity

    @classmethod
    def seeded(cls, dim: int, seed: int, std: float = 0.02) -> "ExtraMlp":
        rng = param_rng(seed, "extra_mlp")
        return cls(
            Tensor(rng.normal(0.0, std, (dim, dim)), requires_grad=True),
            Tensor(rng.normal(0.0, std, (dim,)), requires_grad=True),
            "gelu",
        )

    @classmethod
    def identity(cls, dim: int) -> "ExtraMlp":
        return cls(Tensor(np.eye(dim)), Tensor(np.zeros(dim)), "identity")

    def forward(self, x: np.ndarray):
        u = x @ self.weight.data + self.bias.data
        y = gelu_fwd(u) if self.nonlinearity == "gelu" else u
        return y, (x, u)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        x, u = cache
        du = gelu_bwd(dout, u) if self.nonlinearity == "gelu" else dout
        self.weight.accumulate_grad(x.T @ du)
        self.bias.accumulate_grad(du.sum(axis=0))
        return du @ self.weight.data.T

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MlpComposedAdapter:
    """Alignment module with an extra MLP composed behind it (ablation only)."""

    def __init__(self, base: AlignmentModule, mlp: ExtraMlp):
        self.base = base
        self.mlp = mlp
        self.label = base.label

    def forward(self, x: np.ndarray):
        y, base_cache = self.base.forward(x)
        out, mlp_cache = self.mlp.forward(y)
        return out, (base_cache, mlp_cache)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        base_cache, mlp_cache = cache
        dy = self.mlp.backward(dout, mlp_cache)
        return self.base.backward(dy, base_cache)

    def parameters(self) -> list[Tensor]:
        return self.base.parameters() + self.mlp.parameters()


def attach_extra_mlp(g: AlignmentModule, seed: int) -> MlpComposedAdapter:
    return MlpComposedAdapter(g, ExtraMlp.seeded(g.out_dim, seed))


# -------------------- checkpoint files --------------------


def save_alignment_module(out_dir: str | Path, module: AlignmentModule,
                          init_source_hash: str = "") -> None:
    """Two VTNS tensors plus a key=value manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "weight.vtns", module.weight.data)
    write_tensor(out / "bias.vtns", module.bias.data)
    lines = [
        f"label={module.label}",
        f"D={module.in_dim}",
        f"K={module.out_dim}",
        f"init_source_hash={init_source_hash}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_alignment_module(in_dir: str | Path,
                          expect_label: str | None = None) -> AlignmentModule:
    src = Path(in_dir)
    manifest: dict[str, str] = {}
    for line in (src / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            manifest[key] = value
    label = manifest.get("label", "")
    if expect_label is not None and label != expect_label:
        raise ValueError(
            f"adapter label mismatch: checkpoint is {label!r}, expected {expect_label!r}"
        )
    weight = read_tensor(src / "weight.vtns", expect_rank=2)
    bias = read_tensor(src / "bias.vtns", expect_rank=1)
    if (str(weight.shape[0]) != manifest.get("D")
            or str(weight.shape[1]) != manifest.get("K")):
        raise ValueError("adapter manifest dims do not match stored tensors")
    return AlignmentModule(
        Tensor(weight, requires_grad=True),
        Tensor(bias, requires_grad=True),
        label,
    )
