"""Convolutional feature encoder + transformer context network, span masking,
and the masked contrastive pretraining objective.

The quantizer is a nearest-neighbour codebook updated by exponential moving
average toward the latents assigned to each entry; prediction targets are the
quantized (stop-gradient) conv latents of masked time-steps, contrasted
against distractors drawn from other masked positions of the same utterance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, conv1d, stack_pad
from .layers import (
    apply_block,
    apply_layernorm,
    init_block,
    init_layernorm,
    init_param,
    init_zeros,
    pad_bias,
    positions,
)
from .optim import AdamState, LrSchedule, adam_step, grads_of, schedule_lr, zero_grads
from .seeding import rng_for


@dataclass(frozen=True)
class ConvSpec:
    kernels: tuple
    strides: tuple
    channels: int

    def __post_init__(self):
        if len(self.kernels) != len(self.strides):
            raise ValueError("kernels and strides must have equal length")
        for k, s in zip(self.kernels, self.strides):
            if not (k >= s >= 1):
                raise ValueError(f"need kernel >= stride >= 1, got k={k}, s={s}")


# full-scale geometry: stride 320 samples (20 ms at 16 kHz), receptive field 400 (25 ms)
PAPER_CONV = ConvSpec(kernels=(10, 3, 3, 3, 3, 2, 2), strides=(5, 2, 2, 2, 2, 2, 2), channels=512)
DESK_CONV = ConvSpec(kernels=(3, 3), strides=(2, 2), channels=64)


def conv_out_geometry(spec: ConvSpec, input_len: int) -> tuple[int, int, int]:
    """(output_len, receptive_field, total_stride) for a stack of strided convs.

    Per layer L <- floor((L - k) / s) + 1; receptive_field = 1 + sum over
    layers of (k_i - 1) * prod of earlier strides; total_stride = prod s_i.
    """
    rf, total_stride = 1, 1
    for k, s in zip(spec.kernels, spec.strides):
        rf += (k - 1) * total_stride
        total_stride *= s
    if input_len < rf:
        raise ValueError(f"input length {input_len} shorter than receptive field {rf}")
    length = input_len
    for k, s in zip(spec.kernels, spec.strides):
        length = (length - k) // s + 1
    return length, rf, total_stride


@dataclass(frozen=True)
class MaskSpec:
    mask_prob: float = 0.15
    mask_len: int = 5

    def __post_init__(self):
        if not (0.0 <= self.mask_prob <= 1.0):
            raise ValueError("mask_prob must be in [0, 1]")
        if self.mask_len < 1:
            raise ValueError("mask_len must be a positive integer")


def sample_mask(t: int, m: MaskSpec, rng) -> np.ndarray:
    """Boolean mask of length t: each position independently starts a span of
    min(mask_len, t - start) positions with probability mask_prob; spans union."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    starts = rng.random(t) < m.mask_prob
    mask = np.zeros(t, dtype=bool)
    for s in np.flatnonzero(starts):
        mask[s:s + m.mask_len] = True
    return mask


@dataclass
class Codebook:
    entries: np.ndarray          # [V_q, dim] float32
    ema_decay: float = 0.99
    counts: np.ndarray = None    # EMA of assignment counts

    def __post_init__(self):
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.counts is None:
            self.counts = np.ones(self.entries.shape[0], dtype=np.float64)
        self._sums = self.entries.astype(np.float64) * self.counts[:, None]

    @property
    def size(self):
        return self.entries.shape[0]

    def assign(self, latents: np.ndarray) -> np.ndarray:
        """Nearest entry (squared L2) for each latent row."""
        d = ((latents[:, None, :] - self.entries[None]) ** 2).sum(axis=2)
        return d.argmin(axis=1)

    def ema_update(self, latents: np.ndarray, assignments: np.ndarray) -> None:
        counts = np.bincount(assignments, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self._sums)
        np.add.at(sums, assignments, latents.astype(np.float64))
        d = self.ema_decay
        self.counts = d * self.counts + (1 - d) * counts
        self._sums = d * self._sums + (1 - d) * sums
        active = self.counts > 1e-6
        self.entries = self.entries.copy()
        self.entries[active] = (self._sums[active] / self.counts[active, None]).astype(np.float32)


def make_codebook(size: int, dim: int, seed: int) -> Codebook:
    rng = rng_for(seed, "codebook")
    return Codebook(entries=rng.normal(0, 1.0, size=(size, dim)).astype(np.float32))


def make_codebook_from_latents(latents: np.ndarray, size: int, seed: int) -> Codebook:
    """Seed entries from observed latent rows so initial assignments spread;
    random-normal init tends to collapse every assignment onto one entry."""
    rng = rng_for(seed, "codebook")
    n = latents.shape[0]
    if n == 0:
        raise ValueError("no latents to seed the codebook from")
    idx = rng.choice(n, size=size, replace=n < size)
    entries = latents[idx].astype(np.float32)
    entries = entries + rng.normal(0, 1e-3, size=entries.shape).astype(np.float32)
    return Codebook(entries=entries)


@dataclass(frozen=True)
class EncoderConfig:
    conv: ConvSpec = DESK_CONV
    frame_dim: int = 16
    dim: int = 64
    n_blocks: int = 4
    n_heads: int = 2
    ffn_dim: int = 128
    layer_drop: float = 0.05
    max_positions: int = 256

    def __post_init__(self):
        if not (0.0 <= self.layer_drop < 1.0):
            raise ValueError("layer_drop must be in [0, 1)")
        if self.dim % self.n_heads:
            raise ValueError("dim must divide evenly into heads")


class AcousticEncoder:
    """Conv frontend -> optional span-mask replacement -> transformer blocks."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = params
            return
        rng = rng_for(seed, "encoder-init")
        p: dict[str, Tensor] = {}
        cin = cfg.frame_dim
        for i, (k, s) in enumerate(zip(cfg.conv.kernels, cfg.conv.strides)):
            cout = cfg.conv.channels if i < len(cfg.conv.kernels) - 1 else cfg.dim
            init_param(p, f"enc.conv{i}.w", (k, cin, cout), rng, scale=1.0 / math.sqrt(k * cin))
            init_zeros(p, f"enc.conv{i}.b", (cout,))
            cin = cout
        init_param(p, "enc.mask_emb", (cfg.dim,), rng, scale=0.1)
        init_param(p, "enc.pos", (cfg.max_positions, cfg.dim), rng, scale=0.02)
        for b in range(cfg.n_blocks):
            init_block(p, f"enc.block{b}", cfg.dim, cfg.n_heads, cfg.ffn_dim, rng)
        init_layernorm(p, "enc.ln_final", cfg.dim)
        # zero init makes every initial similarity exactly 0, so the first
        # contrastive loss equals ln(K+1) before any learning happens
        init_zeros(p, "enc.proj_q", (cfg.dim, cfg.dim))
        self.params = p

    # ------------------------------------------------------------------
    def conv_latents(self, frames: np.ndarray) -> Tensor:
        """Frame sequence [T, frame_dim] -> conv latents [T', dim]."""
        conv_out_geometry(self.cfg.conv, frames.shape[0])  # validates length
        x = Tensor(np.asarray(frames, dtype=np.float32))
        for i, s in enumerate(self.cfg.conv.strides):
            x = conv1d(x, self.params[f"enc.conv{i}.w"], self.params[f"enc.conv{i}.b"], s).gelu()
        return x

    def _apply_mask(self, z: Tensor, mask: np.ndarray) -> Tensor:
        keep = (~mask).astype(np.float32)[:, None]
        return z * keep + self.params["enc.mask_emb"] * mask.astype(np.float32)[:, None]

    def contextualize(self, latents: list, train: bool = False,
                      rng: np.random.Generator | None = None):
        """Batch variable-length latents and run the transformer context net.

        Returns (context [B, Tmax, dim], valid [B, Tmax]).  Layer drop applies
        only when train=True (decision per block: uniform draw < layer_drop)."""
        x, valid = stack_pad(latents)
        t = x.shape[1]
        x = x + positions(self.params, "enc.pos", t)
        bias = pad_bias(valid)
        for b in range(self.cfg.n_blocks):
            if train and self.cfg.layer_drop > 0 and rng is not None \
                    and rng.random() < self.cfg.layer_drop:
                continue
            x = apply_block(self.params, f"enc.block{b}", self.cfg.n_heads, x, bias)
        return apply_layernorm(self.params, "enc.ln_final", x), valid

    def encode(self, frames_batch: list, train: bool = False,
               mask_spec: MaskSpec | None = None,
               rng: np.random.Generator | None = None):
        """Full forward for a batch of raw frame arrays.

        Span masking (training only) replaces masked conv latents with the
        learned mask embedding before the context network."""
        latents = [self.conv_latents(f) for f in frames_batch]
        if train and mask_spec is not None and rng is not None:
            latents = [self._apply_mask(z, sample_mask(z.shape[0], mask_spec, rng))
                       for z in latents]
        return self.contextualize(latents, train=train, rng=rng)


# ----------------------------------------------------------------------
# masked contrastive pretraining


def _stable_normalize(x: Tensor, delta: float = 1.0) -> Tensor:
    """x / sqrt(|x|^2 + delta^2): behaves like L2 normalization once |x| >> delta
    but keeps a finite, well-scaled gradient at x = 0."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    inv = ((sq + delta * delta).log() * -0.5).exp()
    return x * inv


@dataclass
class PretrainStepResult:
    loss: float
    masked_positions: int
    skipped_utterances: int
    codebook_usage: int


def pretrain_step(encoder: AcousticEncoder, codebook: Codebook,
                  frames_batch: list, mask_spec: MaskSpec,
                  k_distractors: int, temp: float,
                  rng: np.random.Generator,
                  apply_grads: bool = True) -> PretrainStepResult:
    """One masked-contrastive step over a batch of utterances.

    Accumulates gradients into the encoder parameters (call sites own the
    optimizer) and EMA-updates the codebook toward the assigned latents."""
    latents = [encoder.conv_latents(f) for f in frames_batch]
    masks = [sample_mask(z.shape[0], mask_spec, rng) for z in latents]

    kept, kept_masks, skipped = [], [], 0
    for z, m in zip(latents, masks):
        if int(m.sum()) < k_distractors + 1:
            skipped += 1
            continue
        kept.append(z)
        kept_masks.append(m)
    if not kept:
        return PretrainStepResult(float("nan"), 0, skipped, 0)

    masked_inputs = [encoder._apply_mask(z, m) for z, m in zip(kept, kept_masks)]
    ctx, _ = encoder.contextualize(masked_inputs, train=True, rng=rng)
    proj = ctx @ encoder.params["enc.proj_q"]

    total_loss = None
    total_masked = 0
    all_latents, all_assign = [], []
    for i, (z, m) in enumerate(zip(kept, kept_masks)):
        idx = np.flatnonzero(m)
        zq_latents = z.data[idx]                      # stop-gradient targets
        assign = codebook.assign(zq_latents)
        quant = codebook.entries[assign]              # [M, dim]
        qn = quant / np.maximum(np.linalg.norm(quant, axis=1, keepdims=True), 1e-8)

        mcount = len(idx)
        cands = np.empty((mcount, k_distractors + 1, quant.shape[1]), dtype=np.float32)
        cands[:, 0] = qn
        for j in range(mcount):
            others = np.delete(np.arange(mcount), j)
            pick = rng.choice(others, size=k_distractors, replace=False)
            cands[j, 1:] = qn[pick]

        c = _stable_normalize(proj[i, :z.shape[0]][idx])      # [M, dim]
        sims = (Tensor(cands) @ c.reshape(mcount, quant.shape[1], 1)).reshape(mcount, k_distractors + 1)
        logits = sims * (1.0 / temp)
        logp = logits.log_softmax()
        utt_loss = -(logp[:, 0].sum())
        total_loss = utt_loss if total_loss is None else total_loss + utt_loss
        total_masked += mcount
        all_latents.append(zq_latents)
        all_assign.append(assign)

    loss = total_loss / total_masked
    if apply_grads:
        loss.backward()
    lat = np.concatenate(all_latents)
    asn = np.concatenate(all_assign)
    codebook.ema_update(lat, asn)
    return PretrainStepResult(loss.item(), total_masked, skipped, len(np.unique(asn)))


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 8
    peak_lr: float = 3e-3
    warmup_steps: int = 30
    mask: MaskSpec = field(default_factory=lambda: MaskSpec(0.5, 3))
    k_distractors: int = 10
    temperature: float = 0.1
    codebook_size: int = 64
    ema_decay: float = 0.99
    seed: int = 0


def pretrain(encoder: AcousticEncoder, frames: list, cfg: PretrainConfig):
    """Run the contrastive pretraining loop; returns (codebook, loss log)."""
    sample = np.concatenate([encoder.conv_latents(f).data for f in frames[:16]])
    codebook = make_codebook_from_latents(sample, cfg.codebook_size, cfg.seed)
    codebook.ema_decay = cfg.ema_decay
    rng = rng_for(cfg.seed, "pretrain")
    sched = LrSchedule(cfg.peak_lr, cfg.warmup_steps)
    state = AdamState()
    log = []
    n = len(frames)
    for step in range(1, cfg.steps + 1):
        batch_idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        zero_grads(encoder.params)
        res = pretrain_step(encoder, codebook, [frames[i] for i in batch_idx],
                            cfg.mask, cfg.k_distractors, cfg.temperature, rng)
        if res.masked_positions == 0:
            continue
        adam_step(encoder.params, grads_of(encoder.params), state, schedule_lr(sched, step))
        log.append(res)
    return codebook, log
