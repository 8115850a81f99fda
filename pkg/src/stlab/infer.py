"""Beam-search decoding with optional per-step shallow fusion, plus corpus
BLEU evaluation.

The search operates on step functions so hand-built tabulated models plug in
directly: a step function maps a batch of token-id prefixes (each starting
with bos) to an [n, V] array of next-token log-probabilities.  Fusion adds
lm_weight * lm_logprob to the translation score at every expansion, eos
included; final ranking divides by len^length_penalty (GNMT form available
via DecodeConfig.length_norm)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np


@dataclass
class Hypothesis:
    tokens: list          # token ids, starts with bos
    st_logprob: float
    lm_logprob: float
    finished: bool = False

    def combined(self, lm_weight: float) -> float:
        return self.st_logprob + lm_weight * self.lm_logprob

    def length(self) -> int:
        """Token count without bos (eos counts once finished)."""
        return len(self.tokens) - 1


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 5
    lm_weight: float = 0.1
    length_penalty: float = 0.7
    max_len: int = 40
    length_norm: str = "power"  # or "gnmt"

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be a positive integer")
        if self.lm_weight < 0 or self.length_penalty < 0:
            raise ValueError("lm_weight and length_penalty must be >= 0")
        if self.length_norm not in ("power", "gnmt"):
            raise ValueError(f"unknown length_norm '{self.length_norm}'")


def length_normalize(total_score: float, length: int, alpha: float,
                     form: str = "power") -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    if form == "power":
        return total_score / length ** alpha
    return total_score / (((5.0 + length) / 6.0) ** alpha)


def beam_search(st_step, bos: int, eos: int, cfg: DecodeConfig,
                lm_step=None) -> tuple[Hypothesis, list]:
    """Run beam search; returns (best hypothesis, all ranked finished hyps).

    st_step/lm_step: list of prefixes -> [n, V] log-probs.  Expansion score
    is cumulative st_logprob + lm_weight * lm_logprob; the beam keeps the
    top cfg.beam candidates each step; finished hypotheses are frozen and
    compete only in the final length-normalized ranking."""
    use_lm = lm_step is not None and cfg.lm_weight > 0
    active = [Hypothesis([bos], 0.0, 0.0)]
    finished: list[Hypothesis] = []

    for _ in range(cfg.max_len):
        if not active or len(finished) >= cfg.beam:
            break
        prefixes = [h.tokens for h in active]
        st_lp = np.asarray(st_step(prefixes), dtype=np.float64)
        lm_lp = np.asarray(lm_step(prefixes), dtype=np.float64) if use_lm else np.zeros_like(st_lp)
        n, v = st_lp.shape
        cand_st = np.array([h.st_logprob for h in active])[:, None] + st_lp
        cand_lm = np.array([h.lm_logprob for h in active])[:, None] + lm_lp
        scores = cand_st + cfg.lm_weight * cand_lm
        flat = np.argsort(scores, axis=None, kind="stable")[::-1][:cfg.beam]
        next_active = []
        for f in flat:
            i, tok = divmod(int(f), v)
            h = active[i]
            new = Hypothesis(h.tokens + [tok], float(cand_st[i, tok]),
                             float(cand_lm[i, tok]), finished=(tok == eos))
            if new.finished:
                finished.append(new)
            else:
                next_active.append(new)
        active = next_active

    pool = finished if finished else active
    ranked = sorted(
        pool,
        key=lambda h: length_normalize(h.combined(cfg.lm_weight), h.length(),
                                       cfg.length_penalty, cfg.length_norm),
        reverse=True)
    return ranked[0], ranked


def decode_utterance(model, lm, frames: np.ndarray, cfg: DecodeConfig):
    """Decode one utterance with an StModel-like object (and optional fused
    neural LM sharing its vocabulary). Returns (sentence, best Hypothesis)."""
    if frames.shape[0] == 0:
        raise ValueError("empty utterance")
    if lm is not None and cfg.lm_weight > 0 and len(lm.vocab) != len(model.vocab):
        raise ValueError("fusion LM and translation model must share the vocabulary")
    states = model.encode_states(frames)
    st_step = lambda prefixes: model.step_logprobs_batch(states, prefixes)
    lm_step = None
    if lm is not None and cfg.lm_weight > 0:
        lm_step = lm.step_logprobs_batch
    vocab = model.vocab
    best, _ = beam_search(st_step, vocab.bos_id, vocab.eos_id, cfg, lm_step=lm_step)
    tokens = [t for t in best.tokens[1:] if t != vocab.eos_id]
    return vocab.decode(tokens), best


def decode_manifest(model, lm, manifest, cfg: DecodeConfig):
    """Decode every utterance of a manifest in input order.
    Returns list of (id, sentence)."""
    from .corpus import read_frames

    out = []
    for e in manifest.entries:
        sentence, _ = decode_utterance(model, lm, read_frames(e.frames_path), cfg)
        out.append((e.id, sentence))
    return out


# ----------------------------------------------------------------------
# BLEU


@dataclass
class BleuResult:
    score: float
    precisions: tuple
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list, references: list, max_n: int = 4) -> BleuResult:
    """Corpus-level BLEU-4 on whitespace tokens, no smoothing.

    BP * exp(mean of log clipped n-gram precisions); score is 0 whenever any
    precision is 0 (possible on tiny corpora, by design)."""
    if len(hypotheses) != len(references):
        raise ValueError(f"hypothesis count {len(hypotheses)} != reference count {len(references)}")
    if not references:
        raise ValueError("empty reference set")

    hyp_len = ref_len = 0
    matched = [0] * max_n
    total = [0] * max_n
    for hyp, ref in zip(hypotheses, references):
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hg = _ngrams(h, n)
            rg = _ngrams(r, n)
            total[n - 1] += max(len(h) - n + 1, 0)
            matched[n - 1] += sum(min(c, rg[g]) for g, c in hg.items())

    precisions = tuple(m / t if t > 0 else 0.0 for m, t in zip(matched, total))
    bp = 1.0 if hyp_len >= ref_len else (math.exp(1.0 - ref_len / hyp_len) if hyp_len > 0 else 0.0)
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, precisions, bp, hyp_len, ref_len)


def write_decodes(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid, sentence in pairs:
            f.write(f"{uid}\t{sentence}\n")


def read_decodes(path) -> list:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, _, sentence = line.partition("\t")
            pairs.append((uid, sentence))
    return pairs
