"""Deterministic synthetic speech-translation benchmark plus manifest I/O.

The generator plays the role of the real data pipeline at desk scale: a
labeled parallel split, a large unlabeled audio pool, and two language-model
text corpora (in-domain text from the same grammar as the labeled targets,
general text from an overlapping-but-shifted grammar used by the filtering
experiment).

"Audio" is a sequence of D-dim feature frames: every character of the source
sentence owns a fixed seeded prototype vector which is repeated
frames_per_char times, plus optional Gaussian noise.  Targets are word-by-word
dictionary translations with a deterministic local reordering (swap adjacent
words at even positions), which makes the task strictly harder than monotone
transliteration."""

from __future__ import annotations

import os
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

FRAME_FILE_VERSION = 1
SPLITS = ("labeled_train", "unlabeled_pool", "dev", "test")


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # [T, D] float32
    sample_rate_equivalent: float = 100.0

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] == 0:
            raise ValueError(f"utterance {self.id}: frames must be non-empty [T, D]")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"utterance {self.id}: non-finite frame values")


@dataclass
class ParallelExample:
    utt: Utterance
    target: str | None
    provenance: str = "gold"  # gold | pseudo

    def __post_init__(self):
        if self.provenance == "gold" and self.target is not None and not self.target:
            raise ValueError("gold example with empty target")


@dataclass
class SynthSpec:
    seed: int = 0
    source_vocab_size: int = 24
    target_vocab_size: int = 24
    dictionary: dict[str, str] | None = None
    frame_dim: int = 16
    frames_per_char: int = 4
    noise_sigma: float = 0.0
    sentence_len_range: tuple[int, int] = (3, 8)
    successors_per_word: int = 3
    split_sizes: dict = field(default_factory=lambda: {
        "labeled_train": 40, "unlabeled_pool": 200, "dev": 25, "test": 25,
        "lm_in_domain": 300, "lm_general": 300,
    })

    def __post_init__(self):
        if self.target_vocab_size != self.source_vocab_size:
            raise ValueError("dictionary must be a bijection: vocab sizes must match")
        if self.frames_per_char < 1:
            raise ValueError("frames_per_char must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if any(v < 0 for v in self.split_sizes.values()):
            raise ValueError("split sizes must be >= 0")


def _make_words(rng: np.random.Generator, n: int, lengths=(2, 3)) -> list[str]:
    """n distinct lowercase words."""
    words, seen = [], set()
    while len(words) < n:
        ln = int(rng.integers(lengths[0], lengths[-1] + 1))
        w = "".join(rng.choice(list(string.ascii_lowercase), size=ln))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class SynthLanguage:
    """All deterministic structure derived from a SynthSpec: vocabularies,
    the translation dictionary, bigram grammars and frame prototypes."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = rng_for(spec.seed, "language")
        v = spec.source_vocab_size
        self.source_words = _make_words(rng, v)
        if spec.dictionary is not None:
            if sorted(spec.dictionary) != sorted(self.source_words) or \
                    len(set(spec.dictionary.values())) != v:
                raise ValueError("dictionary must be a bijection on the source vocabulary")
            self.dictionary = dict(spec.dictionary)
            self.target_words = sorted(set(spec.dictionary.values()))
        else:
            self.target_words = _make_words(rng, v)
            self.dictionary = dict(zip(self.source_words, self.target_words))

        k = min(spec.successors_per_word, v)
        self.successors = np.stack([
            rng.choice(v, size=k, replace=False) for _ in range(v)])
        probs = rng.dirichlet(np.ones(k) * 2.0, size=v)
        self.successor_probs = probs
        self.start_probs = rng.dirichlet(np.ones(v))

        # shifted grammar over target words for the general LM corpus
        shift = max(1, v // 3)
        self.general_successors = np.stack([
            (self.successors[(i + shift) % v] + shift) % v for i in range(v)])
        self.general_probs = rng.dirichlet(np.ones(k) * 2.0, size=v)
        self.general_start = rng.dirichlet(np.ones(v))

        chars = sorted(set("".join(self.source_words)) | {" "})
        self.char_prototypes = {
            c: rng.normal(0.0, 1.0, size=spec.frame_dim).astype(np.float32)
            for c in chars}

    # ------------------------------------------------------------------
    def sample_source_sentence(self, rng: np.random.Generator) -> str:
        lo, hi = self.spec.sentence_len_range
        length = int(rng.integers(lo, hi + 1))
        idx = [int(rng.choice(len(self.source_words), p=self.start_probs))]
        for _ in range(length - 1):
            prev = idx[-1]
            j = int(rng.choice(len(self.successors[prev]), p=self.successor_probs[prev]))
            idx.append(int(self.successors[prev][j]))
        return " ".join(self.source_words[i] for i in idx)

    def sample_general_target_sentence(self, rng: np.random.Generator) -> str:
        lo, hi = self.spec.sentence_len_range
        length = int(rng.integers(lo, hi + 1))
        idx = [int(rng.choice(len(self.target_words), p=self.general_start))]
        for _ in range(length - 1):
            prev = idx[-1]
            j = int(rng.choice(len(self.general_successors[prev]), p=self.general_probs[prev]))
            idx.append(int(self.general_successors[prev][j]))
        return " ".join(self.target_words[i] for i in idx)

    def translate(self, source_sentence: str) -> str:
        """Dictionary translation + swap of adjacent words at even positions."""
        words = [self.dictionary[w] for w in source_sentence.split()]
        for i in range(0, len(words) - 1, 2):
            words[i], words[i + 1] = words[i + 1], words[i]
        return " ".join(words)

    def frames_for(self, source_sentence: str, rng: np.random.Generator | None = None) -> np.ndarray:
        protos = [self.char_prototypes[c] for c in source_sentence]
        clean = np.repeat(np.stack(protos), self.spec.frames_per_char, axis=0)
        if self.spec.noise_sigma > 0 and rng is not None:
            clean = clean + rng.normal(0.0, self.spec.noise_sigma, size=clean.shape)
        return clean.astype(np.float32)

    def invert_frames(self, frames: np.ndarray) -> str:
        """Oracle inversion: nearest prototype per frame block -> characters.
        Used only as a sanity ceiling for the benchmark."""
        chars = sorted(self.char_prototypes)
        table = np.stack([self.char_prototypes[c] for c in chars])
        fpc = self.spec.frames_per_char
        out = []
        for start in range(0, frames.shape[0], fpc):
            block = frames[start:start + fpc].mean(axis=0)
            out.append(chars[int(np.argmin(((table - block) ** 2).sum(axis=1)))])
        return "".join(out)

    def oracle_translate_frames(self, frames: np.ndarray) -> str:
        return self.translate(self.invert_frames(frames))


# ----------------------------------------------------------------------
# frame files


def write_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(struct.pack("<III", FRAME_FILE_VERSION, frames.shape[0], frames.shape[1]))
        f.write(frames.astype("<f4").tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12:
            raise ValueError(f"{path}: truncated frame file header")
        version, count, dim = struct.unpack("<III", head)
        if version != FRAME_FILE_VERSION:
            raise ValueError(f"{path}: unsupported frame file version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * dim:
        raise ValueError(f"{path}: frame payload size mismatch")
    return data.reshape(count, dim).astype(np.float32)


# ----------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    frames_path: str
    target: str | None = None
    provenance: str = "gold"


@dataclass
class PipelineManifest:
    split_name: str
    entries: list[ManifestEntry]

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e.id for e in self.entries]


def write_manifest(m: PipelineManifest, path) -> None:
    """TSV id<TAB>frames_path<TAB>target[<TAB>provenance]; paths relative to
    the manifest's directory."""
    path = Path(path)
    base = path.parent
    lines = []
    for e in m.entries:
        rel = os.path.relpath(e.frames_path, base)
        cols = [e.id, rel]
        if e.target is not None or e.provenance != "gold":
            cols.append(e.target if e.target is not None else "")
        if e.provenance != "gold":
            cols.append(e.provenance)
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path, check_frames: bool = True) -> PipelineManifest:
    path = Path(path)
    base = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2 or len(cols) > 4 or not cols[0] or not cols[1]:
            raise ValueError(f"{path}:{lineno}: malformed manifest line {line!r}")
        uid, rel = cols[0], cols[1]
        if uid in seen:
            raise ValueError(f"{path}:{lineno}: duplicate id '{uid}'")
        seen.add(uid)
        target = cols[2] if len(cols) >= 3 and cols[2] != "" else None
        provenance = cols[3] if len(cols) == 4 else "gold"
        if provenance not in ("gold", "pseudo"):
            raise ValueError(f"{path}:{lineno}: bad provenance '{provenance}'")
        frames_path = str((base / rel).resolve())
        if check_frames and not os.path.exists(frames_path):
            raise FileNotFoundError(f"{path}:{lineno}: frames file missing: {frames_path}")
        entries.append(ManifestEntry(uid, frames_path, target, provenance))
    return PipelineManifest(split_name=path.stem, entries=entries)


def load_examples(m: PipelineManifest) -> list[ParallelExample]:
    return [ParallelExample(Utterance(e.id, read_frames(e.frames_path)), e.target, e.provenance)
            for e in m.entries]


# ----------------------------------------------------------------------
# generation


def generate(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write every split under out_dir and return the artifact paths.

    Manifest splits: labeled_train, dev, test (with targets), unlabeled_pool
    (no targets; the hidden gold targets go to unlabeled_pool.refs.tsv for
    test oracles only).  LM text: lm_in_domain.txt, lm_general.txt."""
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    lang = SynthLanguage(spec)
    artifacts: dict[str, Path] = {}

    for split in SPLITS:
        n = spec.split_sizes.get(split, 0)
        srng = rng_for(spec.seed, f"split:{split}")
        entries = []
        hidden_refs = []
        for i in range(n):
            uid = f"{split}-{i:05d}"
            src = lang.sample_source_sentence(srng)
            frames = lang.frames_for(src, srng)
            fpath = frames_dir / f"{uid}.bin"
            write_frames(fpath, frames)
            target = lang.translate(src)
            if split == "unlabeled_pool":
                entries.append(ManifestEntry(uid, str(fpath), None))
                hidden_refs.append((uid, target))
            else:
                entries.append(ManifestEntry(uid, str(fpath), target))
        mpath = out_dir / f"{split}.tsv"
        write_manifest(PipelineManifest(split, entries), mpath)
        artifacts[split] = mpath
        if split == "unlabeled_pool":
            rpath = out_dir / "unlabeled_pool.refs.tsv"
            rpath.write_text("".join(f"{u}\t{t}\n" for u, t in hidden_refs), encoding="utf-8")
            artifacts["unlabeled_pool_refs"] = rpath

    in_rng = rng_for(spec.seed, "lm_in_domain")
    in_lines = [lang.translate(lang.sample_source_sentence(in_rng))
                for _ in range(spec.split_sizes.get("lm_in_domain", 0))]
    p = out_dir / "lm_in_domain.txt"
    p.write_text("".join(s + "\n" for s in in_lines), encoding="utf-8")
    artifacts["lm_in_domain"] = p

    gen_rng = rng_for(spec.seed, "lm_general")
    gen_lines = [lang.sample_general_target_sentence(gen_rng)
                 for _ in range(spec.split_sizes.get("lm_general", 0))]
    p = out_dir / "lm_general.txt"
    p.write_text("".join(s + "\n" for s in gen_lines), encoding="utf-8")
    artifacts["lm_general"] = p
    return artifacts
