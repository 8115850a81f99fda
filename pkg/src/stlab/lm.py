"""Target-side language models: an interpolated modified Kneser-Ney n-gram
model over whitespace words (used for data selection), Moore-Lewis corpus
filtering, and a decoder-only neural LM sharing the BPE vocabulary of the
translation model (used for shallow fusion)."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, embedding, label_smoothed_xent
from .layers import (
    apply_block,
    apply_layernorm,
    apply_linear,
    causal_bias,
    init_block,
    init_layernorm,
    init_linear,
    init_param,
    positions,
)
from .optim import AdamState, LrSchedule, adam_step, grads_of, schedule_lr, zero_grads
from .seeding import rng_for
from .tokenizer import BpeVocab

BOS_WORD = "<s>"
EOS_WORD = "</s>"
UNK_WORD = "<unk>"


def _modified_discounts(counts: Counter) -> tuple[float, float, float]:
    """Chen-Goodman modified discounts D1, D2, D3+ from count-of-counts,
    falling back to 0.75 whenever the estimate is undefined or out of range."""
    n = Counter()
    for c in counts.values():
        if 1 <= c <= 4:
            n[c] += 1
    if n[1] == 0 or n[1] + 2 * n[2] == 0:
        return 0.75, 0.75, 0.75
    y = n[1] / (n[1] + 2 * n[2])
    ds = []
    for i in (1, 2, 3):
        if n[i] == 0:
            ds.append(0.75)
            continue
        d = (i + 1) - (i + 2) * y * n[i + 1] / n[i]
        # a discount above i would remove more mass than a count-i entry has
        ds.append(d if 0.0 <= d <= i else 0.75)
    return tuple(ds)


def continuation_counts(ngrams) -> Counter:
    """N1+(. w2..wn): for every (n-1)-gram suffix, the number of distinct
    left extensions among the given n-grams."""
    return Counter(g[1:] for g in set(ngrams))


def _discount_for(count: int, ds: tuple) -> float:
    if count <= 0:
        return 0.0
    return ds[min(count, 3) - 1]


class NGramModel:
    """Interpolated modified Kneser-Ney LM over whitespace word tokens.

    The highest order uses raw counts; lower orders use continuation counts
    (distinct left extensions). The recursion bottoms out at a uniform
    distribution over the vocabulary, which includes eos and unk, so every
    conditional normalizes to one by construction."""

    def __init__(self, order: int, vocab: set, probs: dict, backoffs: dict):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.vocab = vocab          # predictable words (eos/unk in, bos out)
        self.probs = probs          # (context tuple, word) -> linear prob
        self.backoffs = backoffs    # context tuple -> interpolation weight
        self._uniform = 1.0 / len(vocab)

    # ------------------------------------------------------------------
    @classmethod
    def train(cls, sentences: list, order: int = 4) -> "NGramModel":
        if order < 1:
            raise ValueError("order must be >= 1")
        if not sentences or all(not s.split() for s in sentences):
            raise ValueError("empty training corpus")
        vocab = {EOS_WORD, UNK_WORD}
        padded = []
        for s in sentences:
            words = s.split()
            if not words:
                continue
            vocab.update(words)
            padded.append([BOS_WORD] * max(order - 1, 1) + words + [EOS_WORD])

        # raw counts at the highest order; continuation (distinct left
        # extension) counts below it
        counts: list[Counter] = [Counter() for _ in range(order + 1)]
        for sent in padded:
            pad = max(order - 1, 1)
            for i in range(pad, len(sent)):
                lo = max(0, i - order + 1)
                counts[order][tuple(sent[lo:i + 1])] += 1
        for k in range(order - 1, 0, -1):
            counts[k] = continuation_counts(counts[k + 1])

        uniform = 1.0 / len(vocab)
        probs: dict = {}
        backoffs: dict = {}

        for k in range(1, order + 1):
            level = counts[k]
            ds = _modified_discounts(level)
            totals: dict = defaultdict(float)
            type_counts: dict = defaultdict(lambda: [0, 0, 0])
            for gram, c in level.items():
                h = gram[:-1]
                totals[h] += c
                type_counts[h][min(c, 3) - 1] += 1
            for h, total in totals.items():
                n1, n2, n3 = type_counts[h]
                gamma = (ds[0] * n1 + ds[1] * n2 + ds[2] * n3) / total
                backoffs[h] = gamma
            for gram, c in level.items():
                h, w = gram[:-1], gram[-1]
                lower = cls._lookup(probs, backoffs, h[1:], w, uniform) if k > 1 else uniform
                probs[(h, w)] = (max(c - _discount_for(c, ds), 0.0) / totals[h]
                                 + backoffs[h] * lower)
        return cls(order, vocab, probs, backoffs)

    # ------------------------------------------------------------------
    @staticmethod
    def _lookup(probs, backoffs, context: tuple, word: str, uniform: float) -> float:
        while True:
            if (context, word) in probs:
                return probs[(context, word)]
            if not context:
                return backoffs.get((), 1.0) * uniform
            if context in backoffs:
                lower = NGramModel._lookup(probs, backoffs, context[1:], word, uniform)
                return backoffs[context] * lower
            context = context[1:]

    def prob(self, context: tuple, word: str) -> float:
        """p(word | context) with unknown words mapped to unk."""
        word = word if word in self.vocab else UNK_WORD
        context = tuple(w if w in self.vocab or w == BOS_WORD else UNK_WORD
                        for w in context)[-(self.order - 1):] if self.order > 1 else ()
        return self._lookup(self.probs, self.backoffs, context, word, self._uniform)

    def score(self, sentence: str) -> tuple[float, float]:
        """Natural-log probability of a sentence, eos included.
        Returns (total_logprob, per_token_avg)."""
        words = sentence.split()
        seq = [BOS_WORD] * max(self.order - 1, 1) + words + [EOS_WORD]
        pad = max(self.order - 1, 1)
        total = 0.0
        for i in range(pad, len(seq)):
            lo = max(0, i - self.order + 1)
            total += math.log(self.prob(tuple(seq[lo:i]), seq[i]))
        n = len(words) + 1
        return total, total / n

    def perplexity(self, sentences: list) -> float:
        total = tokens = 0.0
        for s in sentences:
            t, _ = self.score(s)
            total += t
            tokens += len(s.split()) + 1
        return math.exp(-total / tokens)

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"kn 1 {self.order} {len(self.vocab)}\n")
            for w in sorted(self.vocab):
                f.write(f"V\t{w}\n")
            for (h, w), p in sorted(self.probs.items()):
                f.write(f"P\t{' '.join(h)}\t{w}\t{p!r}\n")
            for h, g in sorted(self.backoffs.items()):
                f.write(f"B\t{' '.join(h)}\t{g!r}\n")

    @classmethod
    def load(cls, path) -> "NGramModel":
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 4 or header[0] != "kn" or header[1] != "1":
                raise ValueError(f"bad n-gram model header: {header}")
            order = int(header[2])
            vocab, probs, backoffs = set(), {}, {}
            for line in f:
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "V":
                    vocab.add(parts[1])
                elif parts[0] == "P":
                    h = tuple(parts[1].split()) if parts[1] else ()
                    probs[(h, parts[2])] = float(parts[3])
                elif parts[0] == "B":
                    h = tuple(parts[1].split()) if parts[1] else ()
                    backoffs[h] = float(parts[2])
                else:
                    raise ValueError(f"bad n-gram model line: {line!r}")
        return cls(order, vocab, probs, backoffs)


# ----------------------------------------------------------------------
# Moore-Lewis data selection


def moore_lewis_filter(in_domain: NGramModel, general: NGramModel,
                       sentences: list, keep_fraction: float) -> list:
    """Keep the floor(keep_fraction * N) sentences with the highest
    per-token log-probability difference (in-domain minus general).
    Ties keep input order; output preserves input order."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in [0, 1]")
    n_keep = int(math.floor(keep_fraction * len(sentences)))
    scored = []
    for i, s in enumerate(sentences):
        _, avg_in = in_domain.score(s)
        _, avg_gen = general.score(s)
        scored.append((avg_in - avg_gen, i))
    keep = sorted(sorted(scored, key=lambda t: t[1]),
                  key=lambda t: t[0], reverse=True)[:n_keep]
    kept_idx = sorted(i for _, i in keep)
    return [sentences[i] for i in kept_idx]


# ----------------------------------------------------------------------
# Neural LM


@dataclass(frozen=True)
class NeuralLmConfig:
    dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    context_window: int = 128

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must divide evenly into heads")


class NeuralLm:
    """Decoder-only transformer LM over the shared BPE vocabulary."""

    def __init__(self, vocab: BpeVocab, cfg: NeuralLmConfig = NeuralLmConfig(),
                 seed: int = 0, params: dict | None = None):
        self.vocab = vocab
        self.cfg = cfg
        if params is not None:
            self.params = params
            return
        rng = rng_for(seed, "lm-init")
        p: dict[str, Tensor] = {}
        v = len(vocab)
        init_param(p, "lm.tok_emb", (v, cfg.dim), rng, scale=0.05)
        init_param(p, "lm.pos", (cfg.context_window, cfg.dim), rng, scale=0.02)
        for b in range(cfg.n_blocks):
            init_block(p, f"lm.block{b}", cfg.dim, cfg.n_heads, cfg.ffn_dim, rng)
        init_layernorm(p, "lm.ln_final", cfg.dim)
        init_linear(p, "lm.out", cfg.dim, v, rng)
        self.params = p

    def logits(self, tokens: np.ndarray) -> Tensor:
        """Causal logits for int token ids [B, S]."""
        _, s = tokens.shape
        if s > self.cfg.context_window:
            raise ValueError(f"sequence length {s} exceeds context window {self.cfg.context_window}")
        p = self.params
        x = embedding(p["lm.tok_emb"], tokens) + positions(p, "lm.pos", s)
        bias = causal_bias(s)
        for b in range(self.cfg.n_blocks):
            x = apply_block(p, f"lm.block{b}", self.cfg.n_heads, x, bias)
        x = apply_layernorm(p, "lm.ln_final", x)
        return apply_linear(p, "lm.out", x)

    def step_logprobs_batch(self, prefixes) -> np.ndarray:
        """Next-token log-probs for prefixes starting with bos; prefixes
        longer than the context window are truncated to their tail."""
        v = len(self.vocab)
        out = np.empty((len(prefixes), v))
        by_len: dict[int, list[int]] = {}
        clipped = []
        for i, p in enumerate(prefixes):
            if not p or p[0] != self.vocab.bos_id:
                raise ValueError("prefix must begin with bos")
            p = list(p)[-self.cfg.context_window:]
            clipped.append(p)
            by_len.setdefault(len(p), []).append(i)
        for length, idxs in by_len.items():
            toks = np.array([clipped[i] for i in idxs], dtype=np.int64)
            lp = self.logits(toks)[:, -1, :].log_softmax().data
            for row, i in enumerate(idxs):
                out[i] = lp[row]
        return out

    def sentence_logprob(self, sentence: str) -> tuple[float, int]:
        """Natural-log probability of bos..eos; returns (total, token count)."""
        ids = [self.vocab.bos_id] + self.vocab.encode(sentence) + [self.vocab.eos_id]
        ids = ids[:self.cfg.context_window + 1]
        toks = np.array([ids], dtype=np.int64)
        lp = self.logits(toks[:, :-1]).log_softmax().data[0]
        total = float(sum(lp[t, ids[t + 1]] for t in range(len(ids) - 1)))
        return total, len(ids) - 1

    def perplexity(self, sentences: list) -> float:
        total = tokens = 0.0
        for s in sentences:
            t, n = self.sentence_logprob(s)
            total += t
            tokens += n
        return math.exp(-total / tokens)


@dataclass
class LmTrainConfig:
    lr: float = 1e-3
    max_updates: int = 400
    tokens_per_batch: int = 256
    warmup_steps: int = 40
    eval_every: int | None = None   # default: every 10% of max_updates
    seed: int = 0

    def interval(self) -> int:
        if self.eval_every is not None:
            return max(1, self.eval_every)
        return max(1, self.max_updates // 10)


@dataclass
class LmDevPoint:
    update: int
    perplexity: float


def train_neural_lm(lm: NeuralLm, train_sentences: list, dev_sentences: list,
                    cfg: LmTrainConfig):
    """Train with Adam on an inverse-sqrt schedule; logs dev perplexity at a
    fixed interval and restores the best checkpoint. Returns (lm, log)."""
    if not train_sentences:
        raise ValueError("empty training corpus")
    seqs = []
    for s in train_sentences:
        ids = [lm.vocab.bos_id] + lm.vocab.encode(s) + [lm.vocab.eos_id]
        seqs.append(np.array(ids[:lm.cfg.context_window + 1], dtype=np.int64))

    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    batches, cur, cur_tokens = [], [], 0
    for i in order:
        n = len(seqs[i])
        if cur and cur_tokens + n > cfg.tokens_per_batch:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(i)
        cur_tokens += n
    if cur:
        batches.append(cur)

    rng = rng_for(cfg.seed, "lm-train")
    sched = LrSchedule(cfg.lr, cfg.warmup_steps)
    state = AdamState()
    log: list[LmDevPoint] = []
    best_ppl, best_params = math.inf, None

    def evaluate(update):
        nonlocal best_ppl, best_params
        ppl = lm.perplexity(dev_sentences) if dev_sentences else math.nan
        log.append(LmDevPoint(update, ppl))
        if not dev_sentences or ppl < best_ppl:
            best_ppl = ppl if dev_sentences else best_ppl
            best_params = {k: p.data.copy() for k, p in lm.params.items()}

    if cfg.max_updates == 0:
        evaluate(0)
        return lm, log

    update = 0
    interval = cfg.interval()
    v = len(lm.vocab)
    while update < cfg.max_updates:
        for bi in rng.permutation(len(batches)):
            update += 1
            idxs = batches[bi]
            smax = max(len(seqs[i]) for i in idxs)
            b = len(idxs)
            tok_in = np.zeros((b, smax - 1), dtype=np.int64)
            tok_out = np.zeros((b, smax - 1), dtype=np.int64)
            tmask = np.zeros((b, smax - 1), dtype=bool)
            for r, i in enumerate(idxs):
                s = seqs[i]
                tok_in[r, :len(s) - 1] = s[:-1]
                tok_out[r, :len(s) - 1] = s[1:]
                tmask[r, :len(s) - 1] = True
            zero_grads(lm.params)
            logits = lm.logits(tok_in)
            loss = label_smoothed_xent(logits.reshape(b * (smax - 1), v),
                                       tok_out.reshape(-1), 0.0,
                                       mask=tmask.reshape(-1))
            loss.backward()
            adam_step(lm.params, grads_of(lm.params), state,
                      schedule_lr(sched, update))
            if update % interval == 0 or update == cfg.max_updates:
                evaluate(update)
            if update >= cfg.max_updates:
                break

    if best_params is not None:
        for k, p in lm.params.items():
            p.data = best_params[k].copy()
    return lm, log
