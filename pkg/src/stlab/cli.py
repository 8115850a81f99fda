"""Command-line pipeline orchestration.

Subcommands cover every stage (synth-data .. evaluate) plus `pipeline`,
which runs the full recipe and writes a report comparing the four system
variants: baseline, +pretraining, +self-training, +LM fusion.  Stages are
resumable: each writes a completion marker holding content hashes of its
outputs, and a rerun skips stages whose outputs still match."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

from .acoustic import (
    DESK_CONV,
    PAPER_CONV,
    AcousticEncoder,
    EncoderConfig,
    MaskSpec,
    PretrainConfig,
    pretrain,
)
from .checkpoint import (
    load_checkpoint,
    model_config_hash,
    restore_model,
    save_checkpoint,
    save_model_checkpoint,
)
from .config import ConfigError, RunConfig, load_config
from .corpus import PipelineManifest, SynthSpec, generate, load_manifest, write_manifest
from .infer import DecodeConfig, corpus_bleu, decode_manifest, read_decodes, write_decodes
from .lm import LmTrainConfig, NeuralLm, NeuralLmConfig, NGramModel, moore_lewis_filter, train_neural_lm
from .report import ReportRow, write_bleu_report
from .seeding import child_seed
from .selftrain import SelfTrainPlan, pseudo_label, train_student, write_stage_metrics
from .tokenizer import load_vocab, save_vocab, train_bpe
from .translator import DecoderConfig, StModel, TrainConfig, finetune, write_dev_log

log = logging.getLogger("stlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class MissingArtifactError(FileNotFoundError):
    pass


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return Path(path)


# ----------------------------------------------------------------------
# config -> domain objects


def synth_spec(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(
        seed=cfg["seed"],
        source_vocab_size=cfg["data.vocab_size"],
        target_vocab_size=cfg["data.vocab_size"],
        frame_dim=cfg["data.frame_dim"],
        frames_per_char=cfg["data.frames_per_char"],
        noise_sigma=cfg["data.noise_sigma"],
        sentence_len_range=(cfg["data.sentence_len_min"], cfg["data.sentence_len_max"]),
        successors_per_word=cfg["data.successors_per_word"],
        split_sizes={
            "labeled_train": cfg["data.split.labeled_train"],
            "unlabeled_pool": cfg["data.split.unlabeled_pool"],
            "dev": cfg["data.split.dev"],
            "test": cfg["data.split.test"],
            "lm_in_domain": cfg["data.split.lm_in_domain"],
            "lm_general": cfg["data.split.lm_general"],
        })


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    presets = {"desk": DESK_CONV, "paper": PAPER_CONV}
    if cfg["encoder.conv"] not in presets:
        raise ConfigError(f"encoder.conv must be one of {sorted(presets)}")
    return EncoderConfig(
        conv=presets[cfg["encoder.conv"]],
        frame_dim=cfg["data.frame_dim"],
        dim=cfg["encoder.dim"],
        n_blocks=cfg["encoder.n_blocks"],
        n_heads=cfg["encoder.n_heads"],
        ffn_dim=cfg["encoder.ffn_dim"],
        layer_drop=cfg["encoder.layer_drop"],
        max_positions=cfg["encoder.max_positions"])


def decoder_config(cfg: RunConfig) -> DecoderConfig:
    return DecoderConfig(
        dim=cfg["decoder.dim"],
        n_blocks=cfg["decoder.n_blocks"],
        n_heads=cfg["decoder.n_heads"],
        ffn_dim=cfg["decoder.ffn_dim"],
        max_positions=cfg["decoder.max_positions"])


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    return PretrainConfig(
        steps=cfg["pretrain.steps"],
        batch_size=cfg["pretrain.batch_size"],
        peak_lr=cfg["pretrain.peak_lr"],
        warmup_steps=cfg["pretrain.warmup_steps"],
        mask=MaskSpec(cfg["pretrain.mask_prob"], cfg["pretrain.mask_len"]),
        k_distractors=cfg["pretrain.k_distractors"],
        temperature=cfg["pretrain.temperature"],
        codebook_size=cfg["pretrain.codebook_size"],
        ema_decay=cfg["pretrain.ema_decay"],
        seed=child_seed(cfg["seed"], "pretrain"))


def train_config(cfg: RunConfig, seed: int, lr=None, max_updates=None,
                 encoder_freeze=None) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"] if lr is None else lr,
        label_smooth=cfg["train.label_smooth"],
        encoder_freeze_updates=(cfg["train.encoder_freeze_updates"]
                                if encoder_freeze is None else encoder_freeze),
        layer_drop=cfg["train.layer_drop"],
        mask=MaskSpec(cfg["train.mask_prob"], cfg["train.mask_len"]),
        max_updates=cfg["train.max_updates"] if max_updates is None else max_updates,
        tokens_per_batch=cfg["train.tokens_per_batch"],
        warmup_steps=cfg["train.warmup_steps"],
        checkpoint_every=cfg["train.checkpoint_every"],
        dev_decode=DecodeConfig(beam=cfg["decode.beam"], lm_weight=0.0,
                                length_penalty=cfg["decode.length_penalty"],
                                max_len=cfg["decode.max_len"]),
        seed=seed)


def decode_config(cfg: RunConfig, fused: bool) -> DecodeConfig:
    return DecodeConfig(
        beam=cfg["decode.beam"],
        lm_weight=cfg["decode.lm_weight"] if fused else 0.0,
        length_penalty=cfg["decode.length_penalty"],
        max_len=cfg["decode.max_len"])


# ----------------------------------------------------------------------
# artifact helpers


def _data_dir(cfg) -> Path:
    return cfg["run_dir"] / "data"


def _vocab_path(cfg) -> Path:
    return cfg["run_dir"] / "vocab.bpe"


def _load_run_vocab(cfg):
    return load_vocab(_require(_vocab_path(cfg), "BPE vocabulary"))


def _build_vocab(cfg):
    path = _vocab_path(cfg)
    if path.exists():
        return load_vocab(path)
    train = load_manifest(_require(_data_dir(cfg) / "labeled_train.tsv",
                                   "labeled train manifest"))
    vocab = train_bpe([e.target for e in train.entries], cfg["tokenizer.merges"])
    cfg["run_dir"].mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, path)
    return vocab


def _fresh_encoder(cfg, name: str) -> AcousticEncoder:
    return AcousticEncoder(encoder_config(cfg), seed=child_seed(cfg["seed"], name))


def _pretrained_encoder(cfg, name: str) -> AcousticEncoder:
    enc = _fresh_encoder(cfg, name)
    ckpt = load_checkpoint(_require(cfg["run_dir"] / "encoder.ckpt",
                                    "pretrained encoder checkpoint"))
    restore_model(enc, ckpt, resume=True)
    return enc


def _save_st(cfg, model: StModel, name: str, update: int) -> Path:
    path = cfg["run_dir"] / f"{name}.ckpt"
    arrays = {k: t.data for k, t in model.all_params().items()}
    save_checkpoint(path, "st", model_config_hash(model), update, arrays)
    return path


def _load_st(cfg, path) -> StModel:
    vocab = _load_run_vocab(cfg)
    model = StModel(_fresh_encoder(cfg, "load"), vocab,
                    dec_cfg=decoder_config(cfg), seed=0)
    # resume=False: fine-tuning adjusts the encoder's layer-drop rate, so the
    # saved config hash reflects train.layer_drop rather than encoder.layer_drop;
    # name/shape checks still guard against loading the wrong architecture.
    restore_model(model, load_checkpoint(_require(path, "model checkpoint")))
    return model


def _load_neural_lm(cfg) -> NeuralLm:
    vocab = _load_run_vocab(cfg)
    lm_cfg = NeuralLmConfig(dim=cfg["lm.dim"], n_blocks=cfg["lm.n_blocks"],
                            n_heads=cfg["lm.n_heads"], ffn_dim=cfg["lm.ffn_dim"],
                            context_window=cfg["lm.context_window"])
    lm = NeuralLm(vocab, lm_cfg, seed=0)
    restore_model(lm, load_checkpoint(_require(cfg["run_dir"] / "neural_lm.ckpt",
                                               "neural LM checkpoint")),
                  resume=True)
    return lm


def _read_lines(path) -> list:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]


# ----------------------------------------------------------------------
# stages


def stage_synth_data(cfg) -> list:
    out = _data_dir(cfg)
    artifacts = generate(synth_spec(cfg), out)
    log.info("generated benchmark under %s", out)
    return sorted(set(artifacts.values()))


def stage_pretrain(cfg) -> list:
    from .corpus import read_frames

    pool = load_manifest(_require(_data_dir(cfg) / "unlabeled_pool.tsv",
                                  "unlabeled pool manifest"))
    frames = [read_frames(e.frames_path) for e in pool.entries]
    enc = _fresh_encoder(cfg, "encoder-init")
    codebook, plog = pretrain(enc, frames, pretrain_config(cfg))
    path = save_model_checkpoint(enc, cfg["run_dir"], "encoder",
                                 cfg["pretrain.steps"])
    stable = cfg["run_dir"] / "encoder.ckpt"
    stable.write_bytes(path.read_bytes())
    log_path = cfg["run_dir"] / "pretrain_log.tsv"
    with open(log_path, "w", encoding="utf-8") as f:
        f.write("step\tloss\tcodebook_usage\n")
        for i, r in enumerate(plog, 1):
            f.write(f"{i}\t{r.loss:.6f}\t{r.codebook_usage}\n")
    log.info("pretraining done: final loss %.4f", plog[-1].loss)
    return [stable, log_path]


def _stage_train_st(cfg, init: str, name: str) -> list:
    vocab = _build_vocab(cfg)
    data = _data_dir(cfg)
    train = load_manifest(_require(data / "labeled_train.tsv", "labeled train manifest"))
    dev = load_manifest(_require(data / "dev.tsv", "dev manifest"))
    # both arms share the encoder starting point ("encoder-init"), decoder
    # init, and batch order; the pretrained arm differs only by the
    # pretraining updates applied to that same encoder init
    if init == "pretrained":
        enc = _pretrained_encoder(cfg, "encoder-init")
    elif init == "random":
        enc = _fresh_encoder(cfg, "encoder-init")
    else:
        raise ConfigError(f"unknown init '{init}' (expected pretrained|random)")
    model = StModel(enc, vocab, dec_cfg=decoder_config(cfg),
                    seed=child_seed(cfg["seed"], "st-decoder"))
    tcfg = train_config(cfg, seed=child_seed(cfg["seed"], "st-train"),
                        encoder_freeze=(None if init == "pretrained" else 0))
    model, dev_log = finetune(model, train, dev, tcfg)
    ckpt = _save_st(cfg, model, name, tcfg.max_updates)
    log_path = cfg["run_dir"] / f"{name}_dev_log.tsv"
    write_dev_log(dev_log, log_path)
    log.info("%s best dev BLEU %.2f", name, max(d.bleu for d in dev_log))
    return [_vocab_path(cfg), ckpt, log_path]


def stage_train_baseline(cfg) -> list:
    return _stage_train_st(cfg, "random", "baseline")


def stage_train_teacher(cfg) -> list:
    return _stage_train_st(cfg, "pretrained", "teacher")


def stage_pseudo_label(cfg) -> list:
    teacher = _load_st(cfg, cfg["run_dir"] / "teacher.ckpt")
    pool = load_manifest(_require(_data_dir(cfg) / "unlabeled_pool.tsv",
                                  "unlabeled pool manifest"))
    pseudo, dropped = pseudo_label(teacher, pool, cfg["selftrain.pseudo_beam"],
                                   max_len=cfg["decode.max_len"])
    path = cfg["run_dir"] / "pseudo.tsv"
    write_manifest(pseudo, path)
    log.info("pseudo-labeled %d utterances (%d dropped)", len(pseudo), dropped)
    return [path]


def stage_train_student(cfg) -> list:
    data = _data_dir(cfg)
    teacher = _load_st(cfg, cfg["run_dir"] / "teacher.ckpt")
    labeled = load_manifest(_require(data / "labeled_train.tsv", "labeled train manifest"))
    dev = load_manifest(_require(data / "dev.tsv", "dev manifest"))
    pool = load_manifest(_require(data / "unlabeled_pool.tsv", "unlabeled pool manifest"))
    pseudo = load_manifest(_require(cfg["run_dir"] / "pseudo.tsv", "pseudo-label manifest"))
    plan = SelfTrainPlan(
        labeled=labeled, unlabeled=pool,
        pseudo_beam=cfg["selftrain.pseudo_beam"],
        mix_rule=cfg["selftrain.mix_rule"],
        student_lr=cfg["selftrain.student_lr"],
        final_finetune=cfg["selftrain.final_finetune"],
        stage1_updates=cfg["selftrain.stage1_updates"],
        stage2_updates=cfg["selftrain.stage2_updates"],
        seed=child_seed(cfg["seed"], "selftrain"))
    student_enc = _pretrained_encoder(cfg, "student-encoder")
    base = train_config(cfg, seed=0)
    student, metrics, _ = train_student(teacher, student_enc, plan, dev,
                                        base_cfg=base, pseudo=pseudo)
    ckpt = _save_st(cfg, student, "student",
                    plan.stage1_updates + plan.stage2_updates)
    metrics_path = cfg["run_dir"] / "student_stages.tsv"
    write_stage_metrics(metrics, metrics_path)
    log.info("student best dev BLEU %.2f", max(m.best_dev_bleu for m in metrics))
    return [ckpt, metrics_path]


def stage_train_ngram(cfg) -> list:
    data = _data_dir(cfg)
    order = cfg["lm.ngram_order"]
    outs = []
    for name, corpus_file in (("ngram_in_domain", "lm_in_domain.txt"),
                              ("ngram_general", "lm_general.txt")):
        lines = _read_lines(_require(data / corpus_file, f"LM corpus {corpus_file}"))
        model = NGramModel.train(lines, order=order)
        path = cfg["run_dir"] / f"{name}.lm"
        model.save(path)
        outs.append(path)
    return outs


def stage_filter_corpus(cfg) -> list:
    lm_in = NGramModel.load(_require(cfg["run_dir"] / "ngram_in_domain.lm",
                                     "in-domain n-gram model"))
    lm_gen = NGramModel.load(_require(cfg["run_dir"] / "ngram_general.lm",
                                      "general n-gram model"))
    lines = _read_lines(_require(_data_dir(cfg) / "lm_general.txt",
                                 "general LM corpus"))
    kept = moore_lewis_filter(lm_in, lm_gen, lines, cfg["lm.keep_fraction"])
    path = cfg["run_dir"] / "filtered_general.txt"
    path.write_text("".join(s + "\n" for s in kept), encoding="utf-8")
    log.info("kept %d / %d general sentences", len(kept), len(lines))
    return [path]


def stage_train_lm(cfg) -> list:
    vocab = _build_vocab(cfg)
    data = _data_dir(cfg)
    train_lines = _read_lines(_require(data / "lm_in_domain.txt", "in-domain LM corpus"))
    train_lines += _read_lines(_require(cfg["run_dir"] / "filtered_general.txt",
                                        "filtered general corpus"))
    dev = load_manifest(_require(data / "dev.tsv", "dev manifest"))
    dev_lines = [e.target for e in dev.entries]
    lm_cfg = NeuralLmConfig(dim=cfg["lm.dim"], n_blocks=cfg["lm.n_blocks"],
                            n_heads=cfg["lm.n_heads"], ffn_dim=cfg["lm.ffn_dim"],
                            context_window=cfg["lm.context_window"])
    lm = NeuralLm(vocab, lm_cfg, seed=child_seed(cfg["seed"], "neural-lm"))
    tcfg = LmTrainConfig(lr=cfg["lm.lr"], max_updates=cfg["lm.max_updates"],
                         tokens_per_batch=cfg["lm.tokens_per_batch"],
                         warmup_steps=cfg["lm.warmup_steps"],
                         seed=child_seed(cfg["seed"], "neural-lm-train"))
    lm, llog = train_neural_lm(lm, train_lines, dev_lines, tcfg)
    path = save_model_checkpoint(lm, cfg["run_dir"], "lm", tcfg.max_updates)
    stable = cfg["run_dir"] / "neural_lm.ckpt"
    stable.write_bytes(path.read_bytes())
    log_path = cfg["run_dir"] / "lm_log.tsv"
    with open(log_path, "w", encoding="utf-8") as f:
        f.write("update\tdev_perplexity\n")
        for p in llog:
            f.write(f"{p.update}\t{p.perplexity:.4f}\n")
    log.info("neural LM dev perplexity %.2f", llog[-1].perplexity)
    return [stable, log_path]


def _decode_to_file(cfg, model, lm, manifest, fused: bool, out_path: Path):
    pairs = decode_manifest(model, lm, manifest, decode_config(cfg, fused))
    write_decodes(pairs, out_path)
    return pairs


def stage_decode_report(cfg) -> list:
    data = _data_dir(cfg)
    dev = load_manifest(_require(data / "dev.tsv", "dev manifest"))
    refs = [e.target for e in dev.entries]
    lm = _load_neural_lm(cfg)
    systems = [
        ("baseline", cfg["run_dir"] / "baseline.ckpt", False),
        ("pretraining", cfg["run_dir"] / "teacher.ckpt", False),
        ("pretraining+selftrain", cfg["run_dir"] / "student.ckpt", False),
        ("pretraining+selftrain+lm", cfg["run_dir"] / "student.ckpt", True),
    ]
    rows, outs = [], []
    for name, ckpt, fused in systems:
        model = _load_st(cfg, ckpt)
        out = cfg["run_dir"] / f"decode_dev_{name.replace('+', '_')}.tsv"
        pairs = _decode_to_file(cfg, model, lm if fused else None, dev, fused, out)
        rows.append(ReportRow(name, corpus_bleu([s for _, s in pairs], refs)))
        outs.append(out)
    paths = write_bleu_report(rows, cfg["run_dir"], stem="report")
    for r in rows:
        log.info("%-28s BLEU %.2f", r.system, r.bleu.score)
    return outs + [paths["tsv"], paths["txt"], paths["png"]]


PIPELINE = [
    ("synth-data", stage_synth_data),
    ("pretrain", stage_pretrain),
    ("train-baseline", stage_train_baseline),
    ("train-teacher", stage_train_teacher),
    ("pseudo-label", stage_pseudo_label),
    ("train-student", stage_train_student),
    ("train-ngram", stage_train_ngram),
    ("filter-corpus", stage_filter_corpus),
    ("train-lm", stage_train_lm),
    ("decode-report", stage_decode_report),
]


# ----------------------------------------------------------------------
# stage markers and locking


def _hash_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _marker_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "stages" / f"{stage}.done"


def write_marker(run_dir: Path, stage: str, outputs: list) -> None:
    marker = _marker_path(run_dir, stage)
    marker.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for p in sorted(Path(o) for o in outputs):
        rel = os.path.relpath(p, run_dir)
        lines.append(f"{rel}\t{_hash_file(p)}")
    marker.write_text("\n".join(lines) + "\n", encoding="utf-8")


def marker_valid(run_dir: Path, stage: str) -> bool:
    marker = _marker_path(run_dir, stage)
    if not marker.is_file():
        return False
    for line in marker.read_text(encoding="utf-8").splitlines():
        rel, _, digest = line.partition("\t")
        path = run_dir / rel
        if not path.is_file() or _hash_file(path) != digest:
            return False
    return True


class RunLock:
    """One pipeline per run_dir."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run_dir is locked by another pipeline: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_pipeline(cfg) -> None:
    run_dir = cfg["run_dir"]
    with RunLock(run_dir):
        for stage, fn in PIPELINE:
            if marker_valid(run_dir, stage):
                log.info("stage %s: outputs up to date, skipping", stage)
                continue
            log.info("stage %s: running", stage)
            outputs = fn(cfg)
            write_marker(run_dir, stage, outputs)


# ----------------------------------------------------------------------
# entry point


def cmd_decode(cfg, args) -> None:
    model = _load_st(cfg, Path(args.model))
    manifest = load_manifest(_require(Path(args.manifest), "manifest"))
    lm = _load_neural_lm(cfg) if args.fused else None
    out = Path(args.output)
    _decode_to_file(cfg, model, lm, manifest, args.fused, out)
    log.info("wrote %s", out)


def cmd_evaluate(cfg, args) -> None:
    hyps = read_decodes(_require(Path(args.hyp), "hypothesis decode file"))
    refs = read_decodes(_require(Path(args.ref), "reference decode file"))
    ref_by_id = dict(refs)
    missing = [uid for uid, _ in hyps if uid not in ref_by_id]
    if missing:
        raise MissingArtifactError(f"references missing for ids: {missing[:5]}")
    bleu = corpus_bleu([s for _, s in hyps], [ref_by_id[uid] for uid, _ in hyps])
    out_dir = Path(args.output_dir) if args.output_dir else cfg["run_dir"]
    paths = write_bleu_report([ReportRow(args.system, bleu)], out_dir,
                              stem=args.stem)
    print(f"BLEU {bleu.score:.2f}")
    log.info("report written to %s", paths["tsv"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stlab",
        description="Semi-supervised speech translation on a synthetic benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("overrides", nargs="*", metavar="--key=value",
                       help="config overrides")
        return p

    add("synth-data", "generate the synthetic benchmark")
    add("pretrain", "contrastive pretraining of the acoustic encoder")
    p = add("train-st", "supervised fine-tuning of a translation model")
    p.add_argument("--init", choices=("pretrained", "random"), default="pretrained")
    p.add_argument("--name", default=None, help="checkpoint name")
    add("pseudo-label", "decode the unlabeled pool with the teacher")
    add("train-student", "self-training: mixed-stream student + final fine-tune")
    add("train-ngram", "train in-domain and general Kneser-Ney models")
    add("filter-corpus", "Moore-Lewis selection of general text")
    add("train-lm", "train the fusion neural LM")
    p = add("decode", "decode a manifest with a model checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--fused", action="store_true")
    p = add("evaluate", "BLEU report for a decode file against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--system", default="system")
    p.add_argument("--stem", default="evaluation")
    p.add_argument("--output-dir", default=None)
    add("pipeline", "run every stage and write the four-system report")
    return parser


def _dispatch(args) -> None:
    cfg = load_config(args.config, args.overrides)
    command = args.command
    if command == "synth-data":
        outs = stage_synth_data(cfg)
        write_marker(cfg["run_dir"], "synth-data", outs)
    elif command == "pretrain":
        outs = stage_pretrain(cfg)
        write_marker(cfg["run_dir"], "pretrain", outs)
    elif command == "train-st":
        name = args.name or ("teacher" if args.init == "pretrained" else "baseline")
        _stage_train_st(cfg, args.init, name)
    elif command == "pseudo-label":
        stage_pseudo_label(cfg)
    elif command == "train-student":
        stage_train_student(cfg)
    elif command == "train-ngram":
        stage_train_ngram(cfg)
    elif command == "filter-corpus":
        stage_filter_corpus(cfg)
    elif command == "train-lm":
        stage_train_lm(cfg)
    elif command == "decode":
        cmd_decode(cfg, args)
    elif command == "evaluate":
        cmd_evaluate(cfg, args)
    elif command == "pipeline":
        run_pipeline(cfg)
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown command {command}")


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("STLAB_LOG", "INFO").upper(),
                      logging.INFO),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
