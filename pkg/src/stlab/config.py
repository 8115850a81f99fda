"""Run configuration: a flat dotted-key = value text file with typed known
keys, defaults, and --key=value command-line overrides. Path values resolve
relative to the config file's directory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, malformed line, or badly-typed value."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type tag, default); "path" values are resolved against the config
# file location at load time
REGISTRY: dict[str, tuple[str, object]] = {
    "run_dir": ("path", "run"),
    "seed": ("int", 0),

    # synthetic benchmark
    "data.vocab_size": ("int", 12),
    "data.frame_dim": ("int", 16),
    "data.frames_per_char": ("int", 4),
    "data.noise_sigma": ("float", 0.30),
    "data.sentence_len_min": ("int", 4),
    "data.sentence_len_max": ("int", 6),
    "data.successors_per_word": ("int", 3),
    "data.split.labeled_train": ("int", 24),
    "data.split.unlabeled_pool": ("int", 192),
    "data.split.dev": ("int", 96),
    "data.split.test": ("int", 24),
    "data.split.lm_in_domain": ("int", 300),
    "data.split.lm_general": ("int", 300),

    "tokenizer.merges": ("int", 20),

    # acoustic encoder
    "encoder.conv": ("str", "desk"),        # desk | paper
    "encoder.dim": ("int", 48),
    "encoder.n_blocks": ("int", 2),
    "encoder.n_heads": ("int", 2),
    "encoder.ffn_dim": ("int", 96),
    "encoder.layer_drop": ("float", 0.05),
    "encoder.max_positions": ("int", 256),

    # contrastive pretraining
    "pretrain.steps": ("int", 900),
    "pretrain.batch_size": ("int", 8),
    "pretrain.peak_lr": ("float", 3e-3),
    "pretrain.warmup_steps": ("int", 30),
    "pretrain.mask_prob": ("float", 0.5),
    "pretrain.mask_len": ("int", 3),
    "pretrain.k_distractors": ("int", 10),
    "pretrain.temperature": ("float", 0.1),
    "pretrain.codebook_size": ("int", 64),
    "pretrain.ema_decay": ("float", 0.99),

    # translation decoder
    "decoder.dim": ("int", 48),
    "decoder.n_blocks": ("int", 2),
    "decoder.n_heads": ("int", 2),
    "decoder.ffn_dim": ("int", 96),
    "decoder.max_positions": ("int", 64),

    # supervised fine-tuning
    "train.lr": ("float", 3e-3),
    "train.label_smooth": ("float", 0.1),
    "train.encoder_freeze_updates": ("int", 100),
    "train.layer_drop": ("float", 0.05),
    "train.mask_prob": ("float", 0.15),
    "train.mask_len": ("int", 5),
    "train.max_updates": ("int", 600),
    "train.tokens_per_batch": ("int", 160),
    "train.warmup_steps": ("int", 40),
    "train.checkpoint_every": ("int", 120),

    # self-training
    "selftrain.pseudo_beam": ("int", 4),
    "selftrain.mix_rule": ("str", "duplication"),
    "selftrain.student_lr": ("float", 3e-3),
    "selftrain.final_finetune": ("bool", True),
    "selftrain.stage1_updates": ("int", 900),
    "selftrain.stage2_updates": ("int", 300),

    # language models
    "lm.ngram_order": ("int", 4),
    "lm.keep_fraction": ("float", 0.5),
    "lm.dim": ("int", 48),
    "lm.n_blocks": ("int", 2),
    "lm.n_heads": ("int", 2),
    "lm.ffn_dim": ("int", 96),
    "lm.context_window": ("int", 64),
    "lm.lr": ("float", 2e-3),
    "lm.max_updates": ("int", 300),
    "lm.tokens_per_batch": ("int", 256),
    "lm.warmup_steps": ("int", 30),

    # decoding / evaluation
    "decode.beam": ("int", 5),
    "decode.lm_weight": ("float", 0.1),
    "decode.length_penalty": ("float", 0.7),
    "decode.max_len": ("int", 24),
}

_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool,
            "path": str}


@dataclass
class RunConfig:
    values: dict
    base_dir: Path

    def __getitem__(self, key: str):
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key '{key}'")
        kind, _ = REGISTRY[key]
        raw = self.values[key]
        if kind == "path":
            return (self.base_dir / raw).resolve()
        return raw

    def dump(self) -> str:
        """Canonical text form (sorted keys), suitable for hashing/diffing."""
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))


def _parse_assignment(text: str, where: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, _, raw = text.partition("=")
    return key.strip(), raw.strip()


def _convert(key: str, raw: str, where: str):
    if key not in REGISTRY:
        raise ConfigError(f"{where}: unknown config key '{key}'")
    kind, _ = REGISTRY[key]
    try:
        return _PARSERS[kind](raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad {kind} value for '{key}': {raw!r}") from exc


def load_config(path=None, overrides: list | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional config file, and a list
    of --key=value override strings (in that precedence order)."""
    values = {k: default for k, (_, default) in REGISTRY.items()}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        base_dir = path.parent.resolve()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, raw = _parse_assignment(line, f"{path}:{lineno}")
            values[key] = _convert(key, raw, f"{path}:{lineno}")
    for text in overrides or []:
        spec = text[2:] if text.startswith("--") else text
        key, raw = _parse_assignment(spec, "override")
        values[key] = _convert(key, raw, "override")
    return RunConfig(values, base_dir)
