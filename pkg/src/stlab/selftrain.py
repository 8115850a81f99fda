"""Self-training: teacher pseudo-labeling of an unlabeled pool, balanced
mixing of gold and pseudo data, noisy student training, and a final
labeled-only fine-tune."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .acoustic import AcousticEncoder
from .corpus import ManifestEntry, PipelineManifest, read_frames
from .infer import DecodeConfig, decode_utterance
from .seeding import child_seed, rng_for
from .translator import StModel, TrainConfig, finetune

MIX_RULES = ("equal_importance_sampling", "duplication")


@dataclass
class SelfTrainPlan:
    labeled: PipelineManifest
    unlabeled: PipelineManifest
    pseudo_beam: int = 4
    mix_rule: str = "equal_importance_sampling"
    student_lr: float = 3e-5
    final_finetune: bool = True
    stage1_updates: int = 400
    stage2_updates: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.mix_rule not in MIX_RULES:
            raise ValueError(f"unknown mix rule '{self.mix_rule}'")
        if self.pseudo_beam < 1:
            raise ValueError("pseudo_beam must be >= 1")
        if not self.labeled.entries:
            raise ValueError("labeled manifest is empty")
        if not self.unlabeled.entries:
            raise ValueError("unlabeled pool is empty (degenerate self-training)")
        if any(e.target is None for e in self.labeled.entries):
            raise ValueError("labeled manifest contains entries without targets")
        if any(e.target is not None for e in self.unlabeled.entries):
            raise ValueError("unlabeled manifest contains entries with targets")


def pseudo_label(teacher: StModel, unlabeled: PipelineManifest,
                 beam: int = 4, max_len: int = 40
                 ) -> tuple[PipelineManifest, int]:
    """Decode the pool with the teacher (no LM fusion); returns the pseudo
    manifest and the count of dropped (empty-hypothesis) utterances."""
    if any(e.target is not None for e in unlabeled.entries):
        raise ValueError("unlabeled manifest contains entries with targets")
    cfg = DecodeConfig(beam=beam, lm_weight=0.0, length_penalty=0.7,
                       max_len=max_len)
    entries, dropped = [], 0
    for e in unlabeled.entries:
        try:
            sentence, _ = decode_utterance(teacher, None,
                                           read_frames(e.frames_path), cfg)
        except Exception as exc:
            raise RuntimeError(f"pseudo-labeling failed on utterance '{e.id}'") from exc
        if not sentence.strip():
            dropped += 1
            continue
        entries.append(ManifestEntry(e.id, e.frames_path, sentence,
                                     provenance="pseudo"))
    return PipelineManifest("pseudo", entries), dropped


def mix_stream(labeled: PipelineManifest, pseudo: PipelineManifest,
               rule: str, seed: int, n_draws: int | None = None
               ) -> list[ManifestEntry]:
    """Mix gold and pseudo examples for student training.

    equal_importance_sampling draws each example from the gold set with
    probability 1/2 (uniform within source); duplication repeats the gold set
    ceil(|pseudo|/|labeled|) times, appends the pseudo set, and shuffles."""
    if rule not in MIX_RULES:
        raise ValueError(f"unknown mix rule '{rule}'")
    if not labeled.entries or not pseudo.entries:
        raise ValueError("both manifests must be non-empty")
    rng = rng_for(seed, "mix-stream")
    if rule == "duplication":
        reps = math.ceil(len(pseudo.entries) / len(labeled.entries))
        pool = labeled.entries * reps + pseudo.entries
        return [pool[i] for i in rng.permutation(len(pool))]
    n = n_draws if n_draws is not None else len(labeled.entries) + len(pseudo.entries)
    out = []
    for _ in range(n):
        source = labeled.entries if rng.random() < 0.5 else pseudo.entries
        out.append(source[int(rng.integers(len(source)))])
    return out


@dataclass
class StageMetric:
    stage: str
    updates: int
    best_dev_bleu: float
    checkpoint_path: str = ""


def write_stage_metrics(metrics, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("stage\tupdates\tbest_dev_bleu\tcheckpoint_path\n")
        for m in metrics:
            f.write(f"{m.stage}\t{m.updates}\t{m.best_dev_bleu:.4f}\t{m.checkpoint_path}\n")


def train_student(teacher: StModel, student_encoder: AcousticEncoder,
                  plan: SelfTrainPlan, dev: PipelineManifest,
                  base_cfg: TrainConfig | None = None, run_dir=None,
                  pseudo: PipelineManifest | None = None):
    """Run the self-training recipe; returns (student, metrics, pseudo).

    Stage 1 trains a fresh-decoder student (pretrained encoder) on the mixed
    stream with span-mask noise; stage 2 fine-tunes on labeled data only.
    The returned model carries the overall dev-best parameters."""
    plan.validate()
    if not dev.entries:
        raise ValueError("empty dev manifest")
    if base_cfg is None:
        base_cfg = TrainConfig()

    if pseudo is None:
        pseudo, _ = pseudo_label(teacher, plan.unlabeled, plan.pseudo_beam)
    if not pseudo.entries:
        raise ValueError("pseudo-labeling produced no usable examples")

    student = StModel(student_encoder, teacher.vocab, dec_cfg=teacher.dec_cfg,
                      seed=child_seed(plan.seed, "student-decoder"))

    mixed = PipelineManifest("mixed", mix_stream(
        plan.labeled, pseudo, plan.mix_rule, plan.seed))
    cfg1 = replace(base_cfg, lr=plan.student_lr,
                   max_updates=plan.stage1_updates,
                   seed=child_seed(plan.seed, "stage1"))
    student, log1 = finetune(student, mixed, dev, cfg1, run_dir=run_dir,
                             checkpoint_kind="student-stage1")
    metrics = [StageMetric("mixed", plan.stage1_updates,
                           max(d.bleu for d in log1),
                           log1[-1].checkpoint_path)]
    best_params = {k: p.data.copy() for k, p in student.all_params().items()}
    best_bleu = metrics[0].best_dev_bleu

    if plan.final_finetune:
        cfg2 = replace(base_cfg, lr=plan.student_lr,
                       max_updates=plan.stage2_updates,
                       encoder_freeze_updates=0,
                       seed=child_seed(plan.seed, "stage2"))
        student, log2 = finetune(student, plan.labeled, dev, cfg2,
                                 run_dir=run_dir,
                                 checkpoint_kind="student-stage2")
        stage2_best = max(d.bleu for d in log2)
        metrics.append(StageMetric("labeled_finetune", plan.stage2_updates,
                                   stage2_best, log2[-1].checkpoint_path))
        if stage2_best >= best_bleu:
            best_bleu = stage2_best
        else:
            for k, p in student.all_params().items():
                p.data = best_params[k].copy()
    return student, metrics, pseudo
