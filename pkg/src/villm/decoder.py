"""Frozen byte-level autoregressive decoder plus prompt assembly.

The tokenizer is byte-level (256 byte values + BOS/EOS/PAD), so any UTF-8
instruction round-trips exactly. Prompts follow the fixed template

    "User: " <video token rows> <instruction> " Assistant:" [<answer> EOS]

with the video rows spliced directly into the embedding sequence. The
decoder is a small pre-norm causal transformer with seeded frozen weights;
it exposes a hand-written backward pass to its *input* embeddings so the
loss can reach the adapters, while its own weights never get grad buffers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .encoder import param_rng
from .tensor import (
    Tensor,
    cross_entropy_bwd,
    cross_entropy_fwd,
    ensure_finite,
    gelu_bwd,
    gelu_fwd,
    layer_norm_bwd,
    layer_norm_fwd,
    softmax_rows_bwd,
    softmax_rows_fwd,
    tensor_sha256,
)

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

USER_PREFIX = "User: "
ASSISTANT_SUFFIX = " Assistant:"

# Frozen random weights must preserve signal scale or the spliced video rows
# cannot steer the answer logits: matrices get 1/sqrt(fan_in), embeddings
# unit scale, biases a small jitter.
EMBED_STD = 1.0
BIAS_STD = 0.02


class ByteTokenizer:
    """Bytes are token ids 0..255; specials sit above them."""

    vocab_size = VOCAB_SIZE

    def tokenize(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def detokenize(self, ids) -> str:
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")


@dataclass
class PromptBatch:
    """One spliced sample: content embeddings plus shifted supervision.

    target_ids[i] is the token the model should predict at position i (the
    token embedded at i+1); loss_mask[i] is true exactly where that target
    is an answer byte or the terminating EOS.
    """

    embeddings: Tensor  # (L, K)
    target_ids: np.ndarray  # (L,) int64, PAD where unsupervised
    loss_mask: np.ndarray  # (L,) bool
    video_span: tuple[int, int]  # rows [start, stop) occupied by video tokens
    inference_only: bool = False

    @property
    def length(self) -> int:
        return self.embeddings.data.shape[0]


class TextDecoder:
    """Causal pre-norm transformer, read-only after construction."""

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        self.tokenizer = ByteTokenizer()
        k = cfg.embed_dim

        def gauss(name, shape, std):
            return param_rng(cfg.seed, f"dec.{name}").normal(0.0, std, shape)

        def mat(name, fan_in, fan_out):
            return gauss(name, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))

        w = {
            "embed": gauss("embed", (VOCAB_SIZE, k), EMBED_STD),
            "pos": gauss("pos", (cfg.max_seq_len, k), EMBED_STD),
            "lnf_g": 1.0 + gauss("lnf_g", (k,), BIAS_STD),
            "lnf_b": gauss("lnf_b", (k,), BIAS_STD),
            "head_w": mat("head_w", k, VOCAB_SIZE),
            "head_b": gauss("head_b", (VOCAB_SIZE,), BIAS_STD),
        }
        for i in range(cfg.num_layers):
            for nm in ("wq", "wk", "wv", "wo"):
                w[f"l{i}.{nm}"] = mat(f"l{i}.{nm}", k, k)
                w[f"l{i}.{nm}_b"] = gauss(f"l{i}.{nm}_b", (k,), BIAS_STD)
            w[f"l{i}.mlp_w1"] = mat(f"l{i}.mlp_w1", k, 4 * k)
            w[f"l{i}.mlp_b1"] = gauss(f"l{i}.mlp_b1", (4 * k,), BIAS_STD)
            w[f"l{i}.mlp_w2"] = mat(f"l{i}.mlp_w2", 4 * k, k)
            w[f"l{i}.mlp_b2"] = gauss(f"l{i}.mlp_b2", (k,), BIAS_STD)
            w[f"l{i}.ln1_g"] = 1.0 + gauss(f"l{i}.ln1_g", (k,), BIAS_STD)
            w[f"l{i}.ln1_b"] = gauss(f"l{i}.ln1_b", (k,), BIAS_STD)
            w[f"l{i}.ln2_g"] = 1.0 + gauss(f"l{i}.ln2_g", (k,), BIAS_STD)
            w[f"l{i}.ln2_b"] = gauss(f"l{i}.ln2_b", (k,), BIAS_STD)
        for arr in w.values():
            arr.setflags(write=False)
        self.weights = w

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(tensor_sha256(self.weights[name]).encode())
        return h.hexdigest()

    def embed_ids(self, ids) -> np.ndarray:
        return self.weights["embed"][np.asarray(ids, dtype=np.int64)]

    # ---------------- forward / backward ----------------

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        length, k = x.shape
        nh = self.cfg.num_heads
        return x.reshape(length, nh, k // nh).transpose(1, 0, 2)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        nh, length, dh = x.shape
        return x.transpose(1, 0, 2).reshape(length, nh * dh)

    def forward(self, embeddings: np.ndarray, want_cache: bool = False):
        """(L, K) content embeddings -> (L, vocab) logits.

        Strictly causal: logits at position i depend only on rows <= i.
        With want_cache=True also returns what backward_to_input needs.
        """
        cfg = self.cfg
        w = self.weights
        length = embeddings.shape[0]
        if length > cfg.max_seq_len:
            raise ValueError(
                f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}"
            )
        scale = 1.0 / np.sqrt(cfg.embed_dim // cfg.num_heads)
        causal = np.tril(np.ones((length, length), dtype=bool))

        x = embeddings + w["pos"][:length]
        layer_caches = []
        for i in range(cfg.num_layers):
            h1, c_ln1 = layer_norm_fwd(x, w[f"l{i}.ln1_g"], w[f"l{i}.ln1_b"], 1e-5)
            qh = self._split_heads(h1 @ w[f"l{i}.wq"] + w[f"l{i}.wq_b"])
            kh = self._split_heads(h1 @ w[f"l{i}.wk"] + w[f"l{i}.wk_b"])
            vh = self._split_heads(h1 @ w[f"l{i}.wv"] + w[f"l{i}.wv_b"])
            scores = np.where(causal, (qh @ kh.transpose(0, 2, 1)) * scale, -np.inf)
            att = softmax_rows_fwd(scores)
            ctx = self._merge_heads(att @ vh)
            x = x + ctx @ w[f"l{i}.wo"] + w[f"l{i}.wo_b"]
            h2, c_ln2 = layer_norm_fwd(x, w[f"l{i}.ln2_g"], w[f"l{i}.ln2_b"], 1e-5)
            u = h2 @ w[f"l{i}.mlp_w1"] + w[f"l{i}.mlp_b1"]
            x = x + gelu_fwd(u) @ w[f"l{i}.mlp_w2"] + w[f"l{i}.mlp_b2"]
            if want_cache:
                layer_caches.append((c_ln1, qh, kh, vh, att, c_ln2, u))
        hf, c_lnf = layer_norm_fwd(x, w["lnf_g"], w["lnf_b"], 1e-5)
        logits = hf @ w["head_w"] + w["head_b"]
        ensure_finite(logits, "decoder logits")
        if want_cache:
            return logits, (c_lnf, layer_caches, scale)
        return logits

    def backward_to_input(self, dlogits: np.ndarray, cache) -> np.ndarray:
        """dL/dlogits -> dL/d(content embeddings). Frozen weights get no grads."""
        w = self.weights
        c_lnf, layer_caches, scale = cache
        dx = layer_norm_bwd(dlogits @ w["head_w"].T, c_lnf)[0]
        for i in reversed(range(self.cfg.num_layers)):
            c_ln1, qh, kh, vh, att, c_ln2, u = layer_caches[i]
            dg = dx @ w[f"l{i}.mlp_w2"].T
            dh2 = gelu_bwd(dg, u) @ w[f"l{i}.mlp_w1"].T
            dx = dx + layer_norm_bwd(dh2, c_ln2)[0]
            dctx = self._split_heads(dx @ w[f"l{i}.wo"].T)
            datt = dctx @ vh.transpose(0, 2, 1)
            dvh = att.transpose(0, 2, 1) @ dctx
            dscores = softmax_rows_bwd(datt, att)
            dqh = (dscores @ kh) * scale
            dkh = (dscores.transpose(0, 2, 1) @ qh) * scale
            dh1 = (
                self._merge_heads(dqh) @ w[f"l{i}.wq"].T
                + self._merge_heads(dkh) @ w[f"l{i}.wk"].T
                + self._merge_heads(dvh) @ w[f"l{i}.wv"].T
            )
            dx = dx + layer_norm_bwd(dh1, c_ln1)[0]
        return dx


class PromptOverflowError(ValueError):
    pass


def build_prompt(decoder: TextDecoder, q_v: np.ndarray | Tensor,
                 instruction: str, answer: str | None = None) -> PromptBatch:
    """Assemble one spliced training/inference sample for the fixed template."""
    if not instruction:
        raise ValueError("instruction must be non-empty")
    qv = q_v.data if isinstance(q_v, Tensor) else np.asarray(q_v, dtype=np.float64)
    if qv.ndim != 2 or qv.shape[1] != decoder.cfg.embed_dim:
        raise ValueError(
            f"video tokens must be (R, {decoder.cfg.embed_dim}), got {qv.shape}"
        )
    tok = decoder.tokenizer
    pre_ids = tok.tokenize(USER_PREFIX)
    instr_ids = tok.tokenize(instruction)
    mid_ids = tok.tokenize(ASSISTANT_SUFFIX)
    ans_ids = tok.tokenize(answer) + [EOS] if answer is not None else []

    n_video = qv.shape[0]
    total = len(pre_ids) + n_video + len(instr_ids) + len(mid_ids) + len(ans_ids)
    if total > decoder.cfg.max_seq_len:
        raise PromptOverflowError(
            f"prompt length {total} exceeds max_seq_len {decoder.cfg.max_seq_len}: "
            f"prefix={len(pre_ids)} video={n_video} instruction={len(instr_ids)} "
            f"suffix={len(mid_ids)} answer+eos={len(ans_ids)}"
        )

    embeddings = np.concatenate([
        decoder.embed_ids(pre_ids),
        qv,
        decoder.embed_ids(instr_ids),
        decoder.embed_ids(mid_ids),
        decoder.embed_ids(ans_ids) if ans_ids else np.zeros((0, qv.shape[1])),
    ])
    # token id at each row; video rows carry no id
    ids: list[int | None] = [*pre_ids, *([None] * n_video), *instr_ids, *mid_ids, *ans_ids]
    answer_start = total - len(ans_ids)

    target_ids = np.full(total, PAD, dtype=np.int64)
    loss_mask = np.zeros(total, dtype=bool)
    for i in range(total - 1):
        nxt = ids[i + 1]
        if nxt is not None:
            target_ids[i] = nxt
            if ans_ids and i + 1 >= answer_start:
                loss_mask[i] = True
    return PromptBatch(
        embeddings=Tensor(embeddings),
        target_ids=target_ids,
        loss_mask=loss_mask,
        video_span=(len(pre_ids), len(pre_ids) + n_video),
        inference_only=answer is None,
    )


def prompt_loss(decoder: TextDecoder, batch: PromptBatch):
    """Masked answer-token cross entropy; returns (loss, d_embeddings)."""
    if batch.inference_only:
        raise ValueError("cannot compute loss for an inference-only prompt")
    logits, cache = decoder.forward(batch.embeddings.data, want_cache=True)
    loss, ce_cache = cross_entropy_fwd(logits, batch.target_ids, batch.loss_mask)
    dembed = decoder.backward_to_input(cross_entropy_bwd(ce_cache), cache)
    return loss, dembed


def generate(decoder: TextDecoder, q_v: np.ndarray | Tensor, instruction: str,
             max_new_tokens: int = 16) -> str:
    """Greedy decoding from the spliced prompt until EOS or the token budget.

    Deterministic; argmax ties break toward the lowest token id.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    prompt = build_prompt(decoder, q_v, instruction, answer=None)
    rows = prompt.embeddings.data
    out: list[int] = []
    for _ in range(max_new_tokens):
        if rows.shape[0] >= decoder.cfg.max_seq_len:
            break
        logits = decoder.forward(rows)
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        rows = np.concatenate([rows, decoder.embed_ids([nxt])])
    return decoder.tokenizer.detokenize(out)
