"""Sequence-to-sequence speech translation: acoustic encoder + transformer
decoder with cross-attention, teacher-forced fine-tuning with label smoothing,
encoder freezing, span-mask noise, and dev-BLEU checkpoint selection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .acoustic import AcousticEncoder, MaskSpec
from .autograd import Tensor, embedding, label_smoothed_xent
from .corpus import PipelineManifest, read_frames
from .infer import DecodeConfig, corpus_bleu, decode_utterance
from .layers import (
    apply_block,
    apply_layernorm,
    apply_linear,
    causal_bias,
    init_block,
    init_layernorm,
    init_linear,
    init_param,
    pad_bias,
    positions,
)
from .optim import AdamState, LrSchedule, adam_step, grads_of, schedule_lr, zero_grads
from .seeding import rng_for
from .tokenizer import BpeVocab


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    max_positions: int = 64

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must divide evenly into heads")


class StModel:
    """Encoder + decoder + vocabulary; decoder cross-attends to encoder
    output through a learned bridge projection when the dims differ."""

    def __init__(self, encoder: AcousticEncoder, vocab: BpeVocab,
                 dec_cfg: DecoderConfig = DecoderConfig(), seed: int = 0,
                 dec_params: dict | None = None):
        self.encoder = encoder
        self.vocab = vocab
        self.dec_cfg = dec_cfg
        self.max_target_len = dec_cfg.max_positions
        if dec_params is not None:
            self.dec_params = dec_params
            return
        rng = rng_for(seed, "decoder-init")
        p: dict[str, Tensor] = {}
        v = len(vocab)
        init_param(p, "dec.tok_emb", (v, dec_cfg.dim), rng, scale=0.05)
        init_param(p, "dec.pos", (dec_cfg.max_positions, dec_cfg.dim), rng, scale=0.02)
        if encoder.cfg.dim != dec_cfg.dim:
            init_linear(p, "dec.bridge", encoder.cfg.dim, dec_cfg.dim, rng)
        for b in range(dec_cfg.n_blocks):
            init_block(p, f"dec.block{b}", dec_cfg.dim, dec_cfg.n_heads,
                       dec_cfg.ffn_dim, rng, cross=True)
        init_layernorm(p, "dec.ln_final", dec_cfg.dim)
        init_linear(p, "dec.out", dec_cfg.dim, v, rng)
        self.dec_params = p

    def all_params(self) -> dict:
        return {**self.encoder.params, **self.dec_params}

    # ------------------------------------------------------------------
    def _bridge(self, memory: Tensor) -> Tensor:
        if "dec.bridge.w" in self.dec_params:
            return apply_linear(self.dec_params, "dec.bridge", memory)
        return memory

    def decoder_logits(self, memory: Tensor, mem_valid: np.ndarray,
                       tokens_in: np.ndarray) -> Tensor:
        """Teacher-forced logits. memory [B,T,enc_dim], tokens_in int [B,S]."""
        b, s = tokens_in.shape
        if s > self.max_target_len:
            raise ValueError(f"target length {s} exceeds cap {self.max_target_len}")
        p = self.dec_params
        mem = self._bridge(memory)
        x = embedding(p["dec.tok_emb"], tokens_in) + positions(p, "dec.pos", s)
        self_bias = causal_bias(s)
        mem_bias = pad_bias(mem_valid)
        for blk in range(self.dec_cfg.n_blocks):
            x = apply_block(p, f"dec.block{blk}", self.dec_cfg.n_heads, x,
                            self_bias, memory=mem, mem_bias=mem_bias)
        x = apply_layernorm(p, "dec.ln_final", x)
        return apply_linear(p, "dec.out", x)

    # ------------------------------------------------------------------
    # decoding interface
    def encode_states(self, frames: np.ndarray):
        """Eval-mode encoder forward for one utterance; cached per decode."""
        ctx, valid = self.encoder.encode([frames], train=False)
        return ctx.detach(), valid

    def step_logprobs_batch(self, states, prefixes) -> np.ndarray:
        """Next-token log-probs for a batch of equal-or-mixed-length prefixes
        (each starting with bos). Deterministic: eval mode only."""
        memory, valid = states
        v = len(self.vocab)
        out = np.empty((len(prefixes), v))
        by_len: dict[int, list[int]] = {}
        for i, p in enumerate(prefixes):
            if not p or p[0] != self.vocab.bos_id:
                raise ValueError("prefix must begin with bos")
            if any(t < 0 or t >= v for t in p):
                raise ValueError("prefix token out of range")
            if len(p) > self.max_target_len:
                raise ValueError(f"prefix length {len(p)} exceeds cap {self.max_target_len}")
            by_len.setdefault(len(p), []).append(i)
        for length, idxs in by_len.items():
            toks = np.array([prefixes[i] for i in idxs], dtype=np.int64)
            mem_b = Tensor(np.repeat(memory.data, len(idxs), axis=0))
            val_b = np.repeat(valid, len(idxs), axis=0)
            logits = self.decoder_logits(mem_b, val_b, toks)
            lp = logits[:, -1, :].log_softmax().data
            for row, i in enumerate(idxs):
                out[i] = lp[row]
        return out

    def step_logprobs(self, states, prefix) -> np.ndarray:
        return self.step_logprobs_batch(states, [list(prefix)])[0]


@dataclass
class TrainConfig:
    lr: float = 5e-5                 # full-scale supervised default; 3e-5 for self-training
    label_smooth: float = 0.1
    encoder_freeze_updates: int = 200
    layer_drop: float = 0.05
    mask: MaskSpec = field(default_factory=lambda: MaskSpec(0.15, 5))
    max_updates: int = 3000
    tokens_per_batch: int = 120
    warmup_steps: int = 40
    checkpoint_every: int | None = None   # default: every 10% of max_updates
    dev_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(beam=5, lm_weight=0.0))
    seed: int = 0

    def interval(self) -> int:
        if self.checkpoint_every is not None:
            return max(1, self.checkpoint_every)
        return max(1, self.max_updates // 10)


@dataclass
class DevPoint:
    update: int
    bleu: float
    checkpoint_path: str = ""


def _prepare_examples(model: StModel, manifest: PipelineManifest):
    if not manifest.entries:
        raise ValueError("empty train manifest")
    examples = []
    for e in manifest.entries:
        if e.target is None:
            raise ValueError(f"unlabeled entry '{e.id}' in labeled manifest")
        ids = [model.vocab.bos_id] + model.vocab.encode(e.target) + [model.vocab.eos_id]
        examples.append((read_frames(e.frames_path), np.array(ids, dtype=np.int64)))
    return examples


def _batches(examples, tokens_per_batch: int):
    """Length-sorted bucketing by token count."""
    order = sorted(range(len(examples)), key=lambda i: len(examples[i][1]))
    batches, cur, cur_tokens = [], [], 0
    for i in order:
        n = len(examples[i][1])
        if cur and cur_tokens + n > tokens_per_batch:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(i)
        cur_tokens += n
    if cur:
        batches.append(cur)
    return batches


def _batch_loss(model: StModel, examples, idxs, cfg: TrainConfig,
                rng: np.random.Generator) -> Tensor:
    frames = [examples[i][0] for i in idxs]
    seqs = [examples[i][1] for i in idxs]
    memory, valid = model.encoder.encode(frames, train=True, mask_spec=cfg.mask, rng=rng)
    smax = max(len(s) for s in seqs)
    b = len(seqs)
    tok_in = np.zeros((b, smax - 1), dtype=np.int64)
    tok_out = np.zeros((b, smax - 1), dtype=np.int64)
    tmask = np.zeros((b, smax - 1), dtype=bool)
    for r, s in enumerate(seqs):
        tok_in[r, :len(s) - 1] = s[:-1]
        tok_out[r, :len(s) - 1] = s[1:]
        tmask[r, :len(s) - 1] = True
    logits = model.decoder_logits(memory, valid, tok_in)
    v = len(model.vocab)
    return label_smoothed_xent(logits.reshape(b * (smax - 1), v),
                               tok_out.reshape(-1), cfg.label_smooth,
                               mask=tmask.reshape(-1))


def _set_requires_grad(params: dict, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def evaluate_bleu(model: StModel, manifest: PipelineManifest,
                  decode_cfg: DecodeConfig, lm=None) -> float:
    hyps, refs = [], []
    for e in manifest.entries:
        sentence, _ = decode_utterance(model, lm, read_frames(e.frames_path), decode_cfg)
        hyps.append(sentence)
        refs.append(e.target)
    return corpus_bleu(hyps, refs).score


def finetune(model: StModel, train: PipelineManifest, dev: PipelineManifest,
             cfg: TrainConfig, run_dir=None, checkpoint_kind: str = "st"):
    """Supervised fine-tuning; returns (model, dev log). The model is left at
    the checkpoint with the best dev BLEU.

    The encoder receives zero updates (and zero gradients) for the first
    encoder_freeze_updates steps; span masking and layer drop apply during
    training only."""
    examples = _prepare_examples(model, train)
    longest = max(len(s) for _, s in examples)
    model.max_target_len = min(2 * longest, model.dec_cfg.max_positions)
    model.encoder.cfg = replace(model.encoder.cfg, layer_drop=cfg.layer_drop)
    # a decode prefix holds bos plus generated tokens, so generation must stop
    # one token short of the model's target-length cap
    dev_decode = replace(cfg.dev_decode,
                         max_len=min(cfg.dev_decode.max_len,
                                     model.max_target_len - 1))

    rng = rng_for(cfg.seed, "finetune")
    sched = LrSchedule(cfg.lr, cfg.warmup_steps)
    state = AdamState()
    batches = _batches(examples, cfg.tokens_per_batch)

    dev_log: list[DevPoint] = []
    best_bleu, best_params = -1.0, None

    def checkpoint(update):
        nonlocal best_bleu, best_params
        bleu = evaluate_bleu(model, dev, dev_decode)
        path = ""
        if run_dir is not None:
            from .checkpoint import save_model_checkpoint
            path = str(save_model_checkpoint(model, run_dir, checkpoint_kind, update))
        dev_log.append(DevPoint(update, bleu, path))
        if bleu > best_bleu:
            best_bleu = bleu
            best_params = {k: p.data.copy() for k, p in model.all_params().items()}

    if cfg.max_updates == 0:
        checkpoint(0)
        return model, dev_log

    update = 0
    interval = cfg.interval()
    frozen = cfg.encoder_freeze_updates > 0
    _set_requires_grad(model.encoder.params, not frozen)
    while update < cfg.max_updates:
        order = rng.permutation(len(batches))
        for bi in order:
            update += 1
            if frozen and update > cfg.encoder_freeze_updates:
                _set_requires_grad(model.encoder.params, True)
                frozen = False
            params = model.all_params()
            zero_grads(params)
            loss = _batch_loss(model, examples, batches[bi], cfg, rng)
            loss.backward()
            adam_step(params, grads_of(params), state, schedule_lr(sched, update))
            if update % interval == 0 or update == cfg.max_updates:
                checkpoint(update)
            if update >= cfg.max_updates:
                break
    _set_requires_grad(model.encoder.params, True)

    if best_params is not None:
        for k, p in model.all_params().items():
            p.data = best_params[k].copy()
    return model, dev_log


def write_dev_log(dev_log, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("update\tcheckpoint_path\tbleu\n")
        for d in dev_log:
            f.write(f"{d.update}\t{d.checkpoint_path}\t{d.bleu:.4f}\n")
