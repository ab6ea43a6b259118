"""Synthetic video QA tasks, exact-match evaluation, and ablation sweeps.

Three task kinds exercise the temporal/spatial split:

* direction -- a bright dot traverses the frame left/right/up/down. A
  trajectory and its time-reversal share the same frame *set*, so
  time-averaged (spatial) features cannot separate the two classes while
  per-frame (temporal) features can; the generator self-checks this.
* order -- a solid square and a cross occupy the first and second half of
  the clip; the question is which appears first. Classes are again
  time-reversals of each other.
* static -- one bright square among dimmer distractors, constant over
  time; the question is which quadrant holds it.

Scoring is normalized exact match (lowercase, trim); answers are single
words so byte-level generation is stable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig
from .encoder import EncoderConfig, ImageEncoder, VideoTensor, save_video
from .pooling import spatial_pool, temporal_pool
from .tensor import Tensor
from .training import (
    FeatureCache,
    InstructionRecord,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    load_dataset,
    train,
)

TASK_KINDS = ("direction", "order", "static")

INSTRUCTIONS = {
    "direction": "Which direction does the dot move?",
    "order": "Which shape appears first?",
    "static": "Which quadrant holds the bright square?",
}

CLASSES = {
    "direction": ("left", "right", "up", "down"),
    "order": ("square", "cross"),
    "static": ("top-left", "top-right", "bottom-left", "bottom-right"),
}


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    n_samples: int
    frames: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(
                f"unknown task kind {self.kind!r}; choose one of {', '.join(TASK_KINDS)}"
            )
        if self.n_samples < 1 or self.frames < 1:
            raise ValueError("n_samples and frames must be >= 1")


def _stamp(canvas: np.ndarray, y: int, x: int, sprite: np.ndarray) -> None:
    h, w = sprite.shape
    canvas[y:y + h, x:x + w, :] = np.maximum(
        canvas[y:y + h, x:x + w, :], sprite[:, :, None]
    )


def _square_sprite(side: int, brightness: float) -> np.ndarray:
    return np.full((side, side), brightness)


def _cross_sprite(side: int, brightness: float) -> np.ndarray:
    s = np.zeros((side, side))
    mid = side // 2
    s[mid - 1:mid + 1, :] = brightness
    s[:, mid - 1:mid + 1] = brightness
    return s


def _direction_video(rng, frames: int, size: int, label: str) -> np.ndarray:
    # sprite occupies exactly one cell of a 4x4 grid so per-frame features
    # cluster crisply; a trajectory visits the four cells of one row/column
    cell = size // 4
    cols = np.minimum(np.arange(frames) * 4 // max(frames, 1), 3)
    offset = int(rng.integers(0, 4)) * cell
    video = np.zeros((frames, size, size, 3))
    along_x = label in ("left", "right")
    for i, col in enumerate(cols):
        y, x = (offset, col * cell) if along_x else (col * cell, offset)
        _stamp(video[i], y, x, _square_sprite(cell, 1.0))
    if label in ("left", "up"):
        video = video[::-1].copy()
    return video


def _order_video(rng, frames: int, size: int, label: str) -> np.ndarray:
    side = size // 4
    span = size - side
    first_half = (frames + 1) // 2
    pos_sq = (int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1)))
    pos_cr = (int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1)))
    video = np.zeros((frames, size, size, 3))
    for i in range(frames):
        if i < first_half:
            _stamp(video[i], *pos_sq, _square_sprite(side, 1.0))
        else:
            _stamp(video[i], *pos_cr, _cross_sprite(side, 1.0))
    if label == "cross":
        video = video[::-1].copy()
    return video


def _static_video(rng, frames: int, size: int, label: str) -> np.ndarray:
    side = size // 4
    half = size // 2
    slack = half - side
    quadrants = {
        "top-left": (0, 0),
        "top-right": (0, half),
        "bottom-left": (half, 0),
        "bottom-right": (half, half),
    }
    frame = np.zeros((size, size, 3))
    for name, (qy, qx) in quadrants.items():
        y = qy + int(rng.integers(0, slack + 1))
        x = qx + int(rng.integers(0, slack + 1))
        brightness = 1.0 if name == label else 0.5
        _stamp(frame, y, x, _square_sprite(side, brightness))
    return np.repeat(frame[None], frames, axis=0)


_BUILDERS = {
    "direction": _direction_video,
    "order": _order_video,
    "static": _static_video,
}


def make_sample(task: SyntheticTask, index: int, image_size: int = 32):
    """Deterministic (video, instruction, answer) for one sample index."""
    classes = CLASSES[task.kind]
    label = classes[index % len(classes)]  # round-robin keeps balance within +/-1
    rng = np.random.default_rng([task.seed, TASK_KINDS.index(task.kind), index])
    video = _BUILDERS[task.kind](rng, task.frames, image_size, label)
    return video, INSTRUCTIONS[task.kind], label


def _reversal_self_check(video: np.ndarray, image_size: int) -> None:
    """Spatial features must ignore, temporal features must see, frame order."""
    enc = ImageEncoder(EncoderConfig(image_size=image_size))
    fwd = enc.encode(VideoTensor(Tensor(video)))
    rev = enc.encode(VideoTensor(Tensor(video[::-1].copy())))
    d_spatial = np.abs(temporal_pool(fwd).data - temporal_pool(rev).data).max()
    d_temporal = np.abs(spatial_pool(fwd).data - spatial_pool(rev).data).max()
    if d_spatial > 1e-9:
        raise AssertionError(
            f"time-averaged features changed under frame reversal ({d_spatial:.3e})"
        )
    if d_temporal < 1e-9:
        raise AssertionError("per-frame features blind to frame order")


def gen_synthetic_dataset(task: SyntheticTask, out_dir: str | Path,
                          image_size: int = 32, self_check: bool = True) -> Path:
    """Write videos plus a JSONL of records; byte-identical for a fixed seed."""
    out = Path(out_dir)
    videos = out / "videos"
    videos.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(task.n_samples):
        video, instruction, answer = make_sample(task, i, image_size)
        if self_check and i == 0 and task.kind == "direction":
            _reversal_self_check(video, image_size)
        name = f"{task.kind}_{i:05d}.vtns"
        save_video(videos / name, VideoTensor(Tensor(video)))
        rec = {
            "video": f"videos/{name}",
            "instruction": instruction,
            "answer": answer,
            "id": f"{task.kind}-{task.seed}-{i:05d}",
        }
        lines.append(json.dumps(rec, sort_keys=True))
    jsonl = out / "data.jsonl"
    jsonl.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "manifest.txt").write_text(
        f"task={task.kind}\nn_samples={task.n_samples}\nframes={task.frames}\n"
        f"seed={task.seed}\nimage_size={image_size}\n",
        encoding="utf-8",
    )
    return jsonl


# -------------------- evaluation --------------------


def normalize_answer(text: str) -> str:
    return text.strip().lower()


@dataclass
class EvalReport:
    variant: str
    task: str
    correct: int
    n: int
    config: str

    @property
    def accuracy(self) -> float:
        return self.correct / self.n

    CSV_HEADER = "variant,task,accuracy,correct,n,config"

    def csv_row(self) -> str:
        return (f"{self.variant},{self.task},{self.accuracy!r},"
                f"{self.correct},{self.n},{self.config}")


def _dataset_task(jsonl_path: Path) -> str:
    manifest = jsonl_path.parent / "manifest.txt"
    if manifest.is_file():
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if line.startswith("task="):
                return line.partition("=")[2]
    return "unknown"


def evaluate(checkpoint, dataset, max_new_tokens: int = 16) -> EvalReport:
    """Greedy-generate an answer per record; normalized exact-match accuracy."""
    if isinstance(checkpoint, (str, Path)):
        model, _, cfg, _, _, _ = load_checkpoint(checkpoint)
    elif isinstance(checkpoint, TrainResult):
        model, cfg = checkpoint.model, checkpoint.cfg
    else:
        model, cfg = checkpoint  # (VideoQaModel, TrainConfig)
    task = "unknown"
    if isinstance(dataset, (str, Path)):
        task = _dataset_task(Path(dataset))
        records = load_dataset(dataset)
    else:
        records = list(dataset)
    if not records:
        raise ValueError("evaluation dataset is empty")
    cache = FeatureCache(model.encoder, cfg.frames_T)
    correct = 0
    for rec in records:
        got = model.answer(cache.pooled(rec.video_path), rec.instruction,
                           max_new_tokens=max_new_tokens)
        if normalize_answer(got) == normalize_answer(rec.answer):
            correct += 1
    config = (f"variant={cfg.variant};frames_T={cfg.frames_T};seed={cfg.seed};"
              f"lr={cfg.learning_rate!r};batch={cfg.batch_size};epochs={cfg.epochs}")
    return EvalReport(variant=cfg.variant, task=task, correct=correct,
                      n=len(records), config=config)


def write_eval_csv(path: str | Path, reports: list[EvalReport]) -> None:
    lines = [EvalReport.CSV_HEADER] + [r.csv_row() for r in reports]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -------------------- ablation sweeps --------------------

SWEEP_AXES = ("variant", "frames", "spatial_tokens")

PAPER_FRAME_SWEEP = (50, 75, 100, 150, 200)


@dataclass
class SweepConfig:
    train_jsonl: Path
    eval_jsonl: Path
    train_cfg: TrainConfig
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    max_new_tokens: int = 16


def _sweep_train_cfg(base: TrainConfig, axis: str, value,
                     num_patches: int) -> TrainConfig:
    if axis == "variant":
        return replace(base, variant=str(value))
    if axis == "frames":
        return replace(base, frames_T=int(value))
    if axis == "spatial_tokens":
        count = int(value)
        if count == num_patches:
            return replace(base, variant="full", window=1)
        if count < 1 or num_patches % count != 0:
            raise ValueError(f"spatial token count {count} does not divide {num_patches}")
        window = int(round(np.sqrt(num_patches // count)))
        if window * window * count != num_patches:
            raise ValueError(f"no square window yields {count} of {num_patches} tokens")
        return replace(base, variant="window-pooled", window=window)
    raise ValueError(f"unknown sweep axis {axis!r}; choose one of {', '.join(SWEEP_AXES)}")


def ablation_sweep(axis: str, values, base: SweepConfig,
                   out_csv: str | Path, log=None) -> Path:
    """Train+evaluate once per value with shared seeds; one CSV row per run.

    All columns except wall_seconds are seed-determined; wall_seconds is
    informational timing.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose one of {', '.join(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("no sweep values given")
    train_records = load_dataset(base.train_jsonl)
    eval_records = load_dataset(base.eval_jsonl)
    task = _dataset_task(Path(base.train_jsonl))
    frame_note = ""
    if axis == "frames" and tuple(int(v) for v in values) != PAPER_FRAME_SWEEP:
        frame_note = ";frame_set=scaled"
    header = (
        f"# config: axis={axis};values={','.join(str(v) for v in values)};task={task};"
        f"variant={base.train_cfg.variant};lr={base.train_cfg.learning_rate!r};"
        f"batch={base.train_cfg.batch_size};epochs={base.train_cfg.epochs};"
        f"seed={base.train_cfg.seed};enc_seed={base.enc_cfg.seed};"
        f"dec_seed={base.dec_cfg.seed}{frame_note};"
        f"note=wall_seconds is informational"
    )
    lines = [header, "axis_value,task,accuracy,train_loss_final,wall_seconds"]
    for value in values:
        cfg = _sweep_train_cfg(base.train_cfg, axis, value, base.enc_cfg.num_patches)
        started = time.perf_counter()
        result = train(train_records, cfg, base.enc_cfg, base.dec_cfg, log=log)
        report = evaluate(result, eval_records, max_new_tokens=base.max_new_tokens)
        wall = time.perf_counter() - started
        lines.append(
            f"{value},{task},{report.accuracy!r},{result.losses[-1]!r},{wall:.3f}"
        )
        if log is not None:
            log(f"{axis}={value}: accuracy {report.accuracy:.3f} "
                f"(final loss {result.losses[-1]:.4f}, {wall:.1f}s)")
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
