"""Byte-pair-encoding vocabulary learned on target-language text.

Standard word-internal BPE: words end with an end-of-word marker, merges
never cross word boundaries, pair-frequency ties break lexicographically
so training is deterministic across platforms."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

EOW = "</w>"
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class BpeVocab:
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    id_to_token: dict[int, str] = field(init=False)

    def __post_init__(self):
        self.id_to_token = {i: s for s, i in self.token_to_id.items()}
        self._merge_rank = {pair: r for r, pair in enumerate(self.merges)}

    @property
    def pad_id(self):
        return self.token_to_id["<pad>"]

    @property
    def bos_id(self):
        return self.token_to_id["<bos>"]

    @property
    def eos_id(self):
        return self.token_to_id["<eos>"]

    @property
    def unk_id(self):
        return self.token_to_id["<unk>"]

    def __len__(self):
        return len(self.token_to_id)

    # ------------------------------------------------------------------
    def _segment_word(self, word: str) -> list[str]:
        symbols = list(word) + [EOW]
        ranks = self._merge_rank
        while len(symbols) > 1:
            best, best_rank = None, None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            symbols[best:best + 2] = [symbols[best] + symbols[best + 1]]
        return symbols

    def encode(self, sentence: str) -> list[int]:
        """Sentence -> token ids, no bos/eos. Unknown characters map to unk."""
        ids = []
        for word in sentence.split():
            if all(ch in self.token_to_id for ch in word):
                ids.extend(self.token_to_id[sym] for sym in self._segment_word(word))
            else:
                # fall back to character level so each unknown char maps to unk
                ids.extend(self.token_to_id.get(ch, self.unk_id) for ch in word)
                ids.append(self.token_to_id[EOW])
        return ids

    def decode(self, ids: list[int]) -> str:
        """Token ids -> sentence (whitespace joining at end-of-word markers)."""
        words, current = [], []
        for i in ids:
            if i not in self.id_to_token:
                raise ValueError(f"token id {i} out of range (vocab size {len(self)})")
            sym = self.id_to_token[i]
            if sym in ("<pad>", "<bos>", "<eos>"):
                continue
            if sym == "<unk>":
                current.append(sym)
                continue
            if sym.endswith(EOW):
                current.append(sym[:-len(EOW)])
                words.append("".join(current))
                current = []
            else:
                current.append(sym)
        if current:
            words.append("".join(current))
        return " ".join(w for w in words if w)


def train_bpe(corpus: list[str], target_merges: int) -> BpeVocab:
    """Learn a BPE vocabulary: at every step merge the most frequent adjacent
    symbol pair (lexicographically smallest pair on ties)."""
    if not corpus or all(not s.split() for s in corpus):
        raise ValueError("empty corpus")
    if target_merges < 0:
        raise ValueError("target_merges must be >= 0")

    word_freq = Counter()
    for sentence in corpus:
        word_freq.update(sentence.split())
    words = {w: tuple(w) + (EOW,) for w in word_freq}

    merges: list[tuple[str, str]] = []
    for _ in range(target_merges):
        pairs = Counter()
        for w, symbols in words.items():
            f = word_freq[w]
            for a, b in zip(symbols, symbols[1:]):
                pairs[(a, b)] += f
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        new_words = {}
        for w, symbols in words.items():
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_words[w] = tuple(out)
        words = new_words

    symbols = set()
    for w in word_freq:
        symbols.update(w)
        symbols.add(EOW)
    for a, b in merges:
        symbols.add(a + b)
    token_to_id = {s: i for i, s in enumerate(SPECIALS)}
    for s in sorted(symbols):
        token_to_id[s] = len(token_to_id)
    return BpeVocab(merges=merges, token_to_id=token_to_id)


def save_vocab(v: BpeVocab, path) -> None:
    """UTF-8 text format: header "bpe 1 <n_merges>", merge lines, token lines."""
    lines = [f"bpe 1 {len(v.merges)}"]
    lines.extend(f"{a} {b}" for a, b in v.merges)
    lines.extend(f"{s}\t{i}" for s, i in sorted(v.token_to_id.items(), key=lambda kv: kv[1]))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_vocab(path) -> BpeVocab:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "bpe":
        raise ValueError(f"not a vocab file: bad header {lines[0]!r}")
    if head[1] != "1":
        raise ValueError(f"unsupported vocab format version {head[1]}")
    n_merges = int(head[2])
    merges = []
    for line in lines[1:1 + n_merges]:
        a, b = line.split(" ")
        merges.append((a, b))
    token_to_id = {}
    for line in lines[1 + n_merges:]:
        if not line:
            continue
        sym, i = line.split("\t")
        token_to_id[sym] = int(i)
    return BpeVocab(merges=merges, token_to_id=token_to_id)
