"""Command-line entry point for batch experiments.

Every artifact-producing command writes a run_manifest.txt next to its
outputs (command echo, seeds, frozen-weight hashes, timestamp). Commands
are idempotent given identical flags and seeds, manifests excepted for
their timestamps. Exit codes: 0 success, 1 internal failure, 2 usage or
input error. VILLM_SEED may supply a seed when --seed is absent.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig
from .encoder import (
    EncoderConfig,
    ImageEncoder,
    VideoTensor,
    load_video,
    sample_frames,
    save_features,
)
from .harness import (
    SWEEP_AXES,
    TASK_KINDS,
    EvalReport,
    SweepConfig,
    SyntheticTask,
    ablation_sweep,
    evaluate,
    gen_synthetic_dataset,
    write_eval_csv,
)
from .tensor import Tensor, grad_check
from .training import (
    VARIANTS,
    FeatureCache,
    TrainConfig,
    build_model,
    load_checkpoint,
    load_dataset,
    train,
)
from .vtns import VtnsFormatError

GRAD_TOLERANCE = 1e-4


def _resolve_seed(flag_value: int | None, default: int = 0) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("VILLM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ValueError(f"VILLM_SEED={env!r} is not an integer") from exc
    return default


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    seed: int, hashes: dict[str, str] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"]
    for key, value in sorted(vars(args).items()):
        if key != "func":
            lines.append(f"arg.{key}={value}")
    lines.append(f"seed={seed}")
    for name, digest in (hashes or {}).items():
        lines.append(f"hash.{name}={digest}")
    lines.append(f"timestamp={time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _enc_cfg(args, seed: int) -> EncoderConfig:
    return EncoderConfig(image_size=args.image_size, seed=args.enc_seed
                         if args.enc_seed is not None else seed)


def _dec_cfg(args, seed: int) -> DecoderConfig:
    return DecoderConfig(max_seq_len=args.max_seq_len, seed=args.dec_seed
                         if args.dec_seed is not None else seed)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--enc-seed", type=int, default=None,
                   help="frozen encoder seed (defaults to --seed)")
    p.add_argument("--dec-seed", type=int, default=None,
                   help="frozen decoder seed (defaults to --seed)")
    p.add_argument("--max-seq-len", type=int, default=256)


# -------------------- commands --------------------


def cmd_gen_data(args) -> int:
    seed = _resolve_seed(args.seed, default=0)
    task = SyntheticTask(kind=args.task, n_samples=args.n, frames=args.frames,
                         seed=seed)
    out = Path(args.out)
    jsonl = gen_synthetic_dataset(task, out, image_size=args.image_size)
    _write_manifest(out, "gen-data", args, seed)
    print(f"wrote {task.n_samples} videos and {jsonl}")
    return 0


def cmd_train(args) -> int:
    seed = _resolve_seed(args.seed, default=0)
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
        frames_T=args.frames, seed=seed, variant=args.variant,
        window=args.window,
    )
    dataset = load_dataset(args.data)
    out = Path(args.out)
    result = train(dataset, cfg, _enc_cfg(args, seed), _dec_cfg(args, seed),
                   out_dir=out, log=print)
    _write_manifest(out, "train", args, seed, {
        "encoder": result.model.encoder.weights_hash(),
        "decoder": result.model.decoder.weights_hash(),
    })
    print(f"trained {result.step} steps (final loss {result.losses[-1]:.4f}); "
          f"checkpoint at {result.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.data, max_new_tokens=args.max_new_tokens)
    print(EvalReport.CSV_HEADER)
    print(report.csv_row())
    if args.out:
        out = Path(args.out)
        write_eval_csv(out, [report])
        model, _, _, _, _, _ = load_checkpoint(args.checkpoint)
        _write_manifest(out.parent, "eval", args, _resolve_seed(args.seed), {
            "encoder": model.encoder.weights_hash(),
            "decoder": model.decoder.weights_hash(),
        })
    return 0


def cmd_generate(args) -> int:
    model, _, cfg, _, _, _ = load_checkpoint(args.checkpoint)
    cache = FeatureCache(model.encoder, cfg.frames_T)
    answer = model.answer(cache.pooled(args.video), args.instruction,
                          max_new_tokens=args.max_new_tokens)
    print(answer)
    return 0


def cmd_ablate(args) -> int:
    seed = _resolve_seed(args.seed, default=0)
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
        frames_T=args.frames, seed=seed, variant=args.variant,
    )
    values: list = args.values.split(",")
    if args.axis in ("frames", "spatial_tokens"):
        values = [int(v) for v in values]
    base = SweepConfig(
        train_jsonl=Path(args.data), eval_jsonl=Path(args.eval_data),
        train_cfg=cfg, enc_cfg=_enc_cfg(args, seed), dec_cfg=_dec_cfg(args, seed),
        max_new_tokens=args.max_new_tokens,
    )
    out = ablation_sweep(args.axis, values, base, args.out, log=print)
    _write_manifest(out.parent, "ablate", args, seed, {
        "encoder": ImageEncoder(base.enc_cfg).weights_hash(),
    })
    print(f"sweep CSV at {out}")
    return 0


def cmd_grad_check(args) -> int:
    seed = _resolve_seed(args.seed, default=0)
    cfg = TrainConfig(seed=seed, variant=args.variant)
    model = build_model(cfg, _enc_cfg(args, seed), _dec_cfg(args, seed))
    rng = np.random.default_rng([seed, 0xC4EC])
    frames = rng.uniform(0.0, 1.0, (cfg.frames_T, args.image_size, args.image_size, 3))
    from .pooling import pool_features

    pooled = pool_features(model.encoder.encode(VideoTensor(Tensor(frames))))
    params = model.trainable_params()

    def f() -> float:
        for p in params:
            p.zero_grad()
        return model.sample_loss(pooled, "Which direction does the dot move?", "left")

    err = grad_check(f, params, h=args.h)
    print(f"max relative gradient error: {err:.3e} (tolerance {GRAD_TOLERANCE:.0e})")
    return 0 if err < GRAD_TOLERANCE else 1


def cmd_encode(args) -> int:
    seed = _resolve_seed(args.seed, default=0)
    enc_cfg = _enc_cfg(args, seed)
    video = load_video(args.video)
    if args.frames is not None:
        video = sample_frames(video, args.frames)
    encoder = ImageEncoder(enc_cfg)
    feats = encoder.encode(video)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_features(out, feats)
    _write_manifest(out.parent, "encode", args, seed,
                    {"encoder": encoder.weights_hash()})
    t, n, d = feats.x.dims
    print(f"wrote {out} with shape {t}x{n}x{d}")
    return 0


# -------------------- parser --------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="villm",
        description="Video QA from a frozen image encoder and frozen text "
                    "decoder with trainable alignment adapters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic video QA dataset")
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="instruction-tune the adapters")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=2)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="also write a CSV report")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="answer one instruction about one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate", help="train+evaluate a sweep, emit CSV")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-new-tokens", type=int, default=16)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of adapter gradients")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--h", type=float, default=1e-5)
    _add_model_flags(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("encode", help="encode a VTNS video into VTNS features")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=None,
                   help="sample this many frames before encoding")
    p.add_argument("--seed", type=int, default=None)
    _add_model_flags(p)
    p.set_defaults(func=cmd_encode)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, NotADirectoryError, VtnsFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI failure boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
