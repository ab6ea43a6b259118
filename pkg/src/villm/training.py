"""Single-stage instruction tuning of the alignment adapters.

Only the adapters train; encoder and decoder stay frozen. Loss is masked
cross entropy over answer tokens, optimized with Adam (beta1=0.9,
beta2=0.999, eps=1e-8, no weight decay, no schedule). Parameters and
optimizer moments are kept at float32 granularity after every step so a
float32 checkpoint loses nothing and save/resume reproduces an
uninterrupted run bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import (
    SPATIAL,
    TEMPORAL,
    AlignmentModule,
    ExtraMlp,
    MlpComposedAdapter,
    fuse,
    init_temporal_from_alignment,
    load_alignment_module,
    save_alignment_module,
)
from .decoder import DecoderConfig, TextDecoder, build_prompt, generate, prompt_loss
from .tensor import cross_entropy_fwd
from .encoder import EncoderConfig, ImageEncoder, load_video, sample_frames
from .pooling import PooledFeatures, pool_features, window_pool
from .tensor import Tensor
from .vtns import MAGIC, read_tensor, write_tensor

VARIANTS = (
    "full",
    "no-temporal-module",
    "spatial-only",
    "temporal-only",
    "with-extra-mlp",
    "window-pooled",
    "frozen-gz",
)

CHECKPOINT_FORMAT = 1


def f32_round(arr: np.ndarray) -> np.ndarray:
    """Snap float64 values to the nearest float32-representable value."""
    return arr.astype(np.float32).astype(np.float64)


@dataclass
class InstructionRecord:
    video_path: str
    instruction: str
    answer: str
    id: str


def load_dataset(jsonl_path: str | Path) -> list[InstructionRecord]:
    """JSON-lines records with fields video/instruction/answer/id.

    Video paths resolve relative to the JSONL file; unknown fields are
    ignored. Each referenced file must exist and start like a VTNS video.
    """
    path = Path(jsonl_path)
    base = path.parent
    records: list[InstructionRecord] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        try:
            video = str(obj["video"])
            rec = InstructionRecord(
                video_path=str((base / video) if not Path(video).is_absolute() else video),
                instruction=str(obj["instruction"]),
                answer=str(obj["answer"]),
                id=str(obj["id"]),
            )
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
        if not rec.answer:
            raise ValueError(f"{path}:{lineno}: empty answer")
        vp = Path(rec.video_path)
        if not vp.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: missing video {vp}")
        with open(vp, "rb") as fh:
            head = fh.read(10)
        if head[:4] != MAGIC or len(head) < 10 or head[9] != 4:
            raise ValueError(f"{path}:{lineno}: {vp} is not a rank-4 VTNS video")
        records.append(rec)
    return records


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 32
    epochs: int = 3
    frames_T: int = 8
    seed: int = 0
    variant: str = "full"
    window: int = 2  # spatial window for the window-pooled variant
    adapter_init_std: float = 0.02

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.frames_T < 1:
            raise ValueError("batch_size, epochs and frames_T must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; choose one of {', '.join(VARIANTS)}"
            )


class TrainingDivergedError(RuntimeError):
    pass


class FeatureCache:
    """Video path -> pooled features for one frozen encoder and frame count."""

    def __init__(self, encoder: ImageEncoder, frames_t: int):
        self.encoder = encoder
        self.frames_t = frames_t
        self._store: dict[str, PooledFeatures] = {}

    def pooled(self, video_path: str) -> PooledFeatures:
        hit = self._store.get(video_path)
        if hit is None:
            video = sample_frames(load_video(video_path), self.frames_t)
            hit = pool_features(self.encoder.encode(video))
            self._store[video_path] = hit
        return hit


class VideoQaModel:
    """Frozen encoder + frozen decoder with variant-wired trainable adapters."""

    def __init__(self, variant: str, encoder: ImageEncoder, decoder: TextDecoder,
                 g_z: AlignmentModule | None, g_t: AlignmentModule | None,
                 extra_mlp: ExtraMlp | None = None, window: int = 1):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.encoder = encoder
        self.decoder = decoder
        self.g_z = g_z
        self.g_t = g_t
        self.extra_mlp = extra_mlp
        self.window = window
        self._spatial_branch = (
            MlpComposedAdapter(g_z, extra_mlp) if extra_mlp is not None else g_z
        )

    # ---------------- wiring ----------------

    def trainable_named_params(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        if self.g_t is not None:
            named += [("g_t.weight", self.g_t.weight), ("g_t.bias", self.g_t.bias)]
        if self.g_z is not None and self.variant != "temporal-only":
            if self.variant != "frozen-gz":
                named += [("g_z.weight", self.g_z.weight), ("g_z.bias", self.g_z.bias)]
        if self.extra_mlp is not None:
            named += [("extra_mlp.weight", self.extra_mlp.weight),
                      ("extra_mlp.bias", self.extra_mlp.bias)]
        return named

    def trainable_params(self) -> list[Tensor]:
        return [p for _, p in self.trainable_named_params()]

    def _spatial_input(self, pooled: PooledFeatures) -> np.ndarray:
        if self.variant == "window-pooled":
            grid = int(round(math.isqrt(pooled.spatial_z.data.shape[0])))
            return window_pool(pooled.spatial_z, grid, self.window).data
        return pooled.spatial_z.data

    def video_tokens(self, pooled: PooledFeatures):
        """Variant-wired aligned token rows; returns (q_v, cache)."""
        t = pooled.temporal_t.data
        if self.variant == "spatial-only":
            q_z, c_z = self._spatial_branch.forward(self._spatial_input(pooled))
            return q_z, (None, c_z, 0)
        if self.variant == "temporal-only":
            q_t, c_t = self.g_t.forward(t)
            return q_t, (c_t, None, t.shape[0])
        if self.variant == "no-temporal-module":
            # single alignment module over both pooled features
            q_t, c_t = self.g_z.forward(t)
            q_z, c_z = self.g_z.forward(self._spatial_input(pooled))
        else:
            q_t, c_t = self.g_t.forward(t)
            q_z, c_z = self._spatial_branch.forward(self._spatial_input(pooled))
        return fuse(q_t, q_z).data, (c_t, c_z, t.shape[0])

    def video_tokens_backward(self, d_qv: np.ndarray, cache) -> None:
        c_t, c_z, n_t = cache
        if c_t is not None:
            branch_t = self.g_z if self.variant == "no-temporal-module" else self.g_t
            branch_t.backward(d_qv[:n_t], c_t)
        if c_z is not None:
            self._spatial_branch.backward(d_qv[n_t:], c_z)

    # ---------------- per-sample passes ----------------

    def sample_loss(self, pooled: PooledFeatures, instruction: str, answer: str,
                    grad_scale: float | None = 1.0) -> float:
        q_v, cache = self.video_tokens(pooled)
        batch = build_prompt(self.decoder, q_v, instruction, answer)
        loss, dembed = prompt_loss(self.decoder, batch)
        if grad_scale is not None:
            start, stop = batch.video_span
            self.video_tokens_backward(dembed[start:stop] * grad_scale, cache)
        return loss

    def sample_loss_value(self, pooled: PooledFeatures, instruction: str,
                          answer: str) -> float:
        """Loss without any backward work (for finite-difference probes)."""
        q_v, _ = self.video_tokens(pooled)
        batch = build_prompt(self.decoder, q_v, instruction, answer)
        logits = self.decoder.forward(batch.embeddings.data)
        loss, _ = cross_entropy_fwd(logits, batch.target_ids, batch.loss_mask)
        return loss

    def answer(self, pooled: PooledFeatures, instruction: str,
               max_new_tokens: int = 16) -> str:
        q_v, _ = self.video_tokens(pooled)
        return generate(self.decoder, q_v, instruction, max_new_tokens)


def build_model(cfg: TrainConfig, enc_cfg: EncoderConfig,
                dec_cfg: DecoderConfig) -> VideoQaModel:
    """Fresh model for a variant: seeded g_z, parameter-copied g_t where used."""
    encoder = ImageEncoder(enc_cfg)
    decoder = TextDecoder(dec_cfg)
    g_z = AlignmentModule.seeded(
        enc_cfg.embed_dim, dec_cfg.embed_dim, SPATIAL, cfg.seed,
        std=cfg.adapter_init_std,
    )
    g_z.weight.data = f32_round(g_z.weight.data)
    g_z.bias.data = f32_round(g_z.bias.data)
    g_t = None
    extra = None
    if cfg.variant in ("full", "temporal-only", "with-extra-mlp",
                       "window-pooled", "frozen-gz"):
        g_t = init_temporal_from_alignment(g_z)
    if cfg.variant == "frozen-gz":
        g_z.weight.requires_grad = False
        g_z.bias.requires_grad = False
    if cfg.variant == "with-extra-mlp":
        extra = ExtraMlp.seeded(dec_cfg.embed_dim, cfg.seed)
        extra.weight.data = f32_round(extra.weight.data)
        extra.bias.data = f32_round(extra.bias.data)
    window = cfg.window if cfg.variant == "window-pooled" else 1
    return VideoQaModel(cfg.variant, encoder, decoder, g_z, g_t, extra, window)


# -------------------- optimizer --------------------


class AdamOptimizer:
    """Adam over a fixed parameter list; state snaps to float32 each step."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise RuntimeError("optimizer step before backward")
            if not np.isfinite(g).all():
                raise TrainingDivergedError("non-finite gradient in optimizer step")
            self.m[i] = f32_round(self.beta1 * self.m[i] + (1 - self.beta1) * g)
            self.v[i] = f32_round(self.beta2 * self.v[i] + (1 - self.beta2) * g * g)
            update = self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data = f32_round(p.data - update)


# -------------------- train loop --------------------


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x5E11, epoch]).permutation(n)


def training_step(model: VideoQaModel, records: list[InstructionRecord],
                  cache: FeatureCache, optimizer: AdamOptimizer,
                  step_index: int = 0) -> float:
    """One batch: forward, masked CE, backward into adapters, Adam update.

    Returns the pre-update batch loss (mean of per-sample losses).
    """
    params = model.trainable_params()
    for p in params:
        p.zero_grad()
    scale = 1.0 / len(records)
    total = 0.0
    try:
        for rec in records:
            total += model.sample_loss(
                cache.pooled(rec.video_path), rec.instruction, rec.answer,
                grad_scale=scale,
            )
    except FloatingPointError as exc:
        norms = {name: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
                 for name, p in model.trainable_named_params()}
        raise TrainingDivergedError(
            f"step {step_index}: {exc}; grad norms so far: {norms}"
        ) from exc
    loss = total * scale
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"step {step_index}: non-finite loss {loss}")
    optimizer.step()
    return loss


@dataclass
class TrainResult:
    model: VideoQaModel
    optimizer: AdamOptimizer
    cfg: TrainConfig
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    step: int
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoint_dir: Path | None = None


def _run_steps(model, optimizer, cfg, dataset, cache, start_step, max_steps,
               losses, log=None):
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    epoch_losses: list[float] = []
    epoch_acc: list[float] = []
    perm = None
    perm_epoch = -1
    for step in range(start_step, total_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != perm_epoch:
            perm = _epoch_permutation(cfg.seed, epoch, n)
            perm_epoch = epoch
        batch = [dataset[i] for i in perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        loss = training_step(model, batch, cache, optimizer, step_index=step)
        losses.append(loss)
        epoch_acc.append(loss)
        if pos == steps_per_epoch - 1:
            epoch_losses.append(float(np.mean(epoch_acc)))
            if log is not None:
                log(f"epoch {epoch + 1}/{cfg.epochs} mean loss {epoch_losses[-1]:.4f}")
            epoch_acc = []
    return total_steps, epoch_losses


def train(dataset: list[InstructionRecord], cfg: TrainConfig,
          enc_cfg: EncoderConfig | None = None,
          dec_cfg: DecoderConfig | None = None,
          out_dir: str | Path | None = None,
          max_steps: int | None = None,
          feature_cache: FeatureCache | None = None,
          log=None) -> TrainResult:
    """Seeded epoch loop over the whole pipeline; optionally checkpoints."""
    if not dataset:
        raise ValueError("dataset is empty")
    enc_cfg = enc_cfg or EncoderConfig()
    dec_cfg = dec_cfg or DecoderConfig()
    model = build_model(cfg, enc_cfg, dec_cfg)
    optimizer = AdamOptimizer(model.trainable_params(), cfg.learning_rate)
    cache = feature_cache or FeatureCache(model.encoder, cfg.frames_T)
    if cache.frames_t != cfg.frames_T:
        raise ValueError("feature cache frame count does not match config")
    losses: list[float] = []
    step, epoch_losses = _run_steps(
        model, optimizer, cfg, dataset, cache, 0, max_steps, losses, log=log
    )
    result = TrainResult(model, optimizer, cfg, enc_cfg, dec_cfg, step,
                         losses, epoch_losses)
    if out_dir is not None:
        result.checkpoint_dir = save_checkpoint(out_dir, result)
    return result


def resume_train(checkpoint_dir: str | Path, dataset: list[InstructionRecord],
                 max_steps: int | None = None,
                 out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Continue a checkpointed run; step/epoch schedule picks up where it left."""
    if not dataset:
        raise ValueError("dataset is empty")
    model, optimizer, cfg, enc_cfg, dec_cfg, step = load_checkpoint(checkpoint_dir)
    cache = FeatureCache(model.encoder, cfg.frames_T)
    losses: list[float] = []
    step, epoch_losses = _run_steps(
        model, optimizer, cfg, dataset, cache, step, max_steps, losses, log=log
    )
    result = TrainResult(model, optimizer, cfg, enc_cfg, dec_cfg, step,
                         losses, epoch_losses)
    if out_dir is not None:
        result.checkpoint_dir = save_checkpoint(out_dir, result)
    return result


# -------------------- checkpoints --------------------


def save_checkpoint(out_dir: str | Path, result: TrainResult) -> Path:
    """Adapters, Adam moments and step counter; float32 storage is lossless
    because training state is float32-granular."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, cfg = result.model, result.cfg
    lines = [
        f"format={CHECKPOINT_FORMAT}",
        f"variant={cfg.variant}",
        f"step={result.step}",
        f"adam_t={result.optimizer.t}",
        f"learning_rate={cfg.learning_rate!r}",
        f"batch_size={cfg.batch_size}",
        f"epochs={cfg.epochs}",
        f"frames_T={cfg.frames_T}",
        f"seed={cfg.seed}",
        f"window={cfg.window}",
        f"adapter_init_std={cfg.adapter_init_std!r}",
        f"enc.image_size={result.enc_cfg.image_size}",
        f"enc.patch_size={result.enc_cfg.patch_size}",
        f"enc.embed_dim={result.enc_cfg.embed_dim}",
        f"enc.num_layers={result.enc_cfg.num_layers}",
        f"enc.num_heads={result.enc_cfg.num_heads}",
        f"enc.seed={result.enc_cfg.seed}",
        f"dec.embed_dim={result.dec_cfg.embed_dim}",
        f"dec.num_layers={result.dec_cfg.num_layers}",
        f"dec.num_heads={result.dec_cfg.num_heads}",
        f"dec.max_seq_len={result.dec_cfg.max_seq_len}",
        f"dec.seed={result.dec_cfg.seed}",
        f"encoder_hash={model.encoder.weights_hash()}",
        f"decoder_hash={model.decoder.weights_hash()}",
    ]
    (out / "state.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    init_hash = model.g_z.param_hash() if model.g_z is not None else ""
    if model.g_z is not None:
        save_alignment_module(out / "g_z", model.g_z, init_source_hash=init_hash)
    if model.g_t is not None:
        save_alignment_module(out / "g_t", model.g_t, init_source_hash=init_hash)
    if model.extra_mlp is not None:
        mdir = out / "extra_mlp"
        mdir.mkdir(exist_ok=True)
        write_tensor(mdir / "weight.vtns", model.extra_mlp.weight.data)
        write_tensor(mdir / "bias.vtns", model.extra_mlp.bias.data)
        (mdir / "manifest.txt").write_text(
            f"nonlinearity={model.extra_mlp.nonlinearity}\n", encoding="utf-8"
        )
    adam_dir = out / "adam"
    adam_dir.mkdir(exist_ok=True)
    for i, _ in enumerate(result.optimizer.params):
        write_tensor(adam_dir / f"m{i}.vtns", result.optimizer.m[i])
        write_tensor(adam_dir / f"v{i}.vtns", result.optimizer.v[i])
    return out


def _read_state(path: Path) -> dict[str, str]:
    state: dict[str, str] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"unreadable checkpoint manifest: {exc}") from exc
    for line in text.splitlines():
        if line.strip():
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"corrupt checkpoint manifest line: {line!r}")
            state[key] = value
    return state


def load_checkpoint(ckpt_dir: str | Path):
    """Returns (model, optimizer, cfg, enc_cfg, dec_cfg, step), all bit-exact."""
    src = Path(ckpt_dir)
    state = _read_state(src / "state.txt")
    if state.get("format") != str(CHECKPOINT_FORMAT):
        raise ValueError(
            f"checkpoint format {state.get('format')!r} != {CHECKPOINT_FORMAT}"
        )
    cfg = TrainConfig(
        learning_rate=float(state["learning_rate"]),
        batch_size=int(state["batch_size"]),
        epochs=int(state["epochs"]),
        frames_T=int(state["frames_T"]),
        seed=int(state["seed"]),
        variant=state["variant"],
        window=int(state["window"]),
        adapter_init_std=float(state["adapter_init_std"]),
    )
    enc_cfg = EncoderConfig(
        image_size=int(state["enc.image_size"]),
        patch_size=int(state["enc.patch_size"]),
        embed_dim=int(state["enc.embed_dim"]),
        num_layers=int(state["enc.num_layers"]),
        num_heads=int(state["enc.num_heads"]),
        seed=int(state["enc.seed"]),
    )
    dec_cfg = DecoderConfig(
        embed_dim=int(state["dec.embed_dim"]),
        num_layers=int(state["dec.num_layers"]),
        num_heads=int(state["dec.num_heads"]),
        max_seq_len=int(state["dec.max_seq_len"]),
        seed=int(state["dec.seed"]),
    )
    encoder = ImageEncoder(enc_cfg)
    decoder = TextDecoder(dec_cfg)
    if encoder.weights_hash() != state["encoder_hash"]:
        raise ValueError("checkpoint encoder hash mismatch")
    if decoder.weights_hash() != state["decoder_hash"]:
        raise ValueError("checkpoint decoder hash mismatch")

    g_z = load_alignment_module(src / "g_z", expect_label=SPATIAL) \
        if (src / "g_z").is_dir() else None
    g_t = load_alignment_module(src / "g_t", expect_label=TEMPORAL) \
        if (src / "g_t").is_dir() else None
    extra = None
    if (src / "extra_mlp").is_dir():
        mdir = src / "extra_mlp"
        nonlin = _read_state(mdir / "manifest.txt")["nonlinearity"]
        extra = ExtraMlp(
            Tensor(read_tensor(mdir / "weight.vtns", expect_rank=2), requires_grad=True),
            Tensor(read_tensor(mdir / "bias.vtns", expect_rank=1), requires_grad=True),
            nonlin,
        )
    if cfg.variant == "frozen-gz" and g_z is not None:
        g_z.weight.requires_grad = False
        g_z.bias.requires_grad = False
    window = cfg.window if cfg.variant == "window-pooled" else 1
    model = VideoQaModel(cfg.variant, encoder, decoder, g_z, g_t, extra, window)

    optimizer = AdamOptimizer(model.trainable_params(), cfg.learning_rate)
    optimizer.t = int(state["adam_t"])
    for i, p in enumerate(optimizer.params):
        m = read_tensor(src / "adam" / f"m{i}.vtns")
        v = read_tensor(src / "adam" / f"v{i}.vtns")
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ValueError("optimizer moment shape mismatch in checkpoint")
        optimizer.m[i] = m
        optimizer.v[i] = v
    return model, optimizer, cfg, enc_cfg, dec_cfg, int(state["step"])
