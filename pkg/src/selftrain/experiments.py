"""Desk benchmark runs and the named ablation studies.

A :class:`DeskRun` holds one seed's data and lazily trains the models the
studies share (teacher, pseudo pool, fully noised student), so running
several studies on the same seed does not retrain them.
"""
from __future__ import annotations

import statistics
from functools import cached_property

import numpy as np

from .config import (
    DataConfig,
    NoiseConfig,
    PlanEntry,
    PseudoConfig,
    RandAugmentPolicy,
    RunConfig,
    StageConfig,
    TrainConfig,
)
from .data import load_idx, split, synth_generate, synth_holdout
from .errors import ConfigError
from .pseudo import DECILES, bucket_by_confidence, generate_pseudo_labels
from .robust import (
    adversarial_accuracy,
    corruption_error_matrix,
    eval_topk,
    flip_probability,
    load_baseline,
    mce,
    mfr,
    perturbation_sequences,
)
from .rng import derive_rng
from .train import (
    iterate_noisy_student,
    make_pseudo_pool,
    pretrain_then_finetune,
    train_student,
    train_supervised,
    warm_start_student,
)

# label-preserving ops for the synthetic images (no flips or inversions)
DESK_MENU = ("translate-x", "translate-y", "shear-x", "shear-y", "rotate", "brightness", "contrast", "sharpness", "cutout")
DESK_POLICY = RandAugmentPolicy(num_ops=2, magnitude=12, op_menu=DESK_MENU)
DESK_NOISE = NoiseConfig(augment_policy=DESK_POLICY)
DESK_TRAIN = TrainConfig(labeled_batch=25, epochs=120, base_lr=0.05, lr_reference_batch=25, noise=DESK_NOISE)
# students see far more (and noisier) data per step than the teacher and keep
# improving well past the teacher's budget
DESK_STUDENT = DESK_TRAIN.model_copy(update={"epochs": 240, "ratio": 14})


VALIDATION_TOTAL = 500


def desk_config(seed=0):
    """The desk-scale operating point used by the benchmark and the acceptance suite."""
    config = RunConfig(
        teacher=StageConfig(arch="mlp-L", train=DESK_TRAIN),
        student=DESK_STUDENT,
        plan=(PlanEntry(ratio=14), PlanEntry(ratio=14), PlanEntry(ratio=28)),
    )
    return reseed(config, seed)


def reseed(config: RunConfig, seed):
    """Copy of ``config`` with the run seed and every stage seed set to ``seed``."""
    plan = tuple(e if e.train is None else e.model_copy(update={"train": e.train.model_copy(update={"seed": seed})}) for e in config.plan)
    teacher = config.teacher.model_copy(update={"train": config.teacher.train.model_copy(update={"seed": seed})})
    return config.model_copy(update={"seed": seed, "teacher": teacher, "student": config.student.model_copy(update={"seed": seed}), "plan": plan})


def load_data(data: DataConfig, seed):
    """``(labeled, unlabeled, test)`` for a data section."""
    if data.source == "synthetic":
        s = data.synthetic
        labeled, unlabeled, test, _ = synth_generate(
            s.classes,
            s.per_class_labeled,
            s.unlabeled_total,
            s.in_domain_fraction,
            s.image_side,
            seed,
            test_total=s.test_total,
            noise_level=s.noise_level,
            max_shift=s.max_shift,
            prototype_seed=s.prototype_seed,
            max_rotate=s.max_rotate,
            jitter=s.jitter,
        )
        return labeled, unlabeled, test
    if data.idx is None:
        raise ConfigError("data.source is 'idx' but no idx section is given", "data.idx")
    d = data.idx
    labeled = load_idx(d.labeled_images, d.labeled_labels, d.classes)
    unlabeled = load_idx(d.unlabeled_images, None, d.classes)
    test = load_idx(d.test_images, d.test_labels, d.classes)
    return labeled, unlabeled, test


def median(values):
    return float(statistics.median(values))


class DeskRun:
    """One seed of the benchmark with shared, lazily trained models."""

    def __init__(self, config: RunConfig = None, seed=None):
        config = config or desk_config()
        self.seed = config.seed if seed is None else seed
        self.config = config
        self.labeled, self.unlabeled, self.test = load_data(config.data, self.seed)

    def _train_cfg(self, base: TrainConfig, **update):
        update.setdefault("seed", self.seed)
        return base.model_copy(update=update)

    def accuracy(self, model):
        return eval_topk(model, self.test, 1)

    @cached_property
    def validation(self):
        """``(validation, test)`` for model selection; the synthetic benchmark draws a fresh set."""
        data = self.config.data
        if data.source == "synthetic":
            s = data.synthetic
            val = synth_holdout(
                s.classes, VALIDATION_TOTAL, s.image_side, self.seed, noise_level=s.noise_level, max_shift=s.max_shift,
                prototype_seed=s.prototype_seed, max_rotate=s.max_rotate, jitter=s.jitter,
            )
            return val, self.test
        # no spare labeled images: select on one half of the test set, report on the other
        val, rest = split(self.test, [0.5, 0.5], self.seed)
        return val, rest

    # shared models

    @cached_property
    def teacher(self):
        stage = self.config.teacher
        return train_supervised(self.labeled, self._train_cfg(stage.train), stage.arch).model

    @cached_property
    def pool(self):
        return make_pseudo_pool(self.teacher, self.unlabeled, self.config.pseudo, self.seed)

    @property
    def student_cfg(self):
        return self._train_cfg(self.config.student)

    @cached_property
    def student(self):
        return self.train_student()

    def train_student(self, pool=None, arch=None, teacher=None, **update):
        cfg = self._train_cfg(self.config.student, **update)
        arch = arch or self.config.plan[0].arch
        return train_student(self.labeled, self.pool if pool is None else pool, arch, cfg, teacher=teacher or self.teacher).model

    # studies

    def noise_study(self):
        """Full noise, input noise removed, all noise removed, and a noised teacher."""
        noise = self.config.student.noise
        no_aug = noise.model_copy(update={"enable_aug": False})
        noised_pool = make_pseudo_pool(self.teacher, self.unlabeled, self.config.pseudo, self.seed, teacher_noise=noise)
        return {
            "teacher": self.accuracy(self.teacher),
            "full": self.accuracy(self.student),
            "no_aug": self.accuracy(self.train_student(noise=no_aug)),
            "no_aug_sd_dropout": self.accuracy(self.train_student(noise=NoiseConfig.clean())),
            "noised_teacher": self.accuracy(self.train_student(pool=noised_pool)),
        }

    def iterative(self, iterations=2):
        """Accuracy of the teacher and of each plan iteration (first entry reuses :attr:`student`)."""
        plan = self.config.plan[:iterations]
        row = {"teacher": self.accuracy(self.teacher), "iteration_1": self.accuracy(self.student)}
        current = self.student
        for i, entry in enumerate(plan[1:], start=2):
            res = iterate_noisy_student(
                self.labeled,
                self.unlabeled,
                self.config.teacher,
                (entry,),
                self._train_cfg(self.config.student, seed=self.seed + i - 1),
                self.config.pseudo,
                teacher=current,
            )
            current = res[-1].model
            row[f"iteration_{i}"] = self.accuracy(current)
        return row

    def joint_study(self, finetune_grid=(0, 10, 30, 60)):
        """Joint training against pseudo-only pretraining followed by labeled finetuning.

        The finetune length is picked on a held-out validation set; both
        models are then scored on the test set.
        """
        val, test = self.validation
        cfg = self.student_cfg
        best, scores = pretrain_then_finetune(self.pool, self.labeled, cfg, finetune_grid, self.config.plan[0].arch, val)
        return {
            "supervised": eval_topk(self.teacher, test, 1),
            "pretrain_finetune": eval_topk(best, test, 1),
            "joint": eval_topk(self.student, test, 1),
            "finetune_val_scores": scores,
        }

    def confidence_buckets(self, intervals=DECILES, size=1000, min_members=50):
        """Teacher pseudo labels grouped by confidence; small buckets are dropped.

        Each kept bucket is resampled to ``size`` examples (without
        replacement when it has enough members).
        """
        raw = generate_pseudo_labels(self.teacher, self.unlabeled)
        out = []
        for (lo, hi), bucket in zip(intervals, bucket_by_confidence(raw, intervals)):
            if len(bucket) < min_members:
                continue
            rng = derive_rng(self.seed, "bucket", int(round(lo * 1000)))
            idx = rng.choice(len(bucket), size=size, replace=len(bucket) < size)
            out.append(((lo, hi), bucket.subset(np.sort(idx))))
        return out

    def soft_vs_hard(self, buckets=None, ratio=1):
        """Students trained on one confidence bucket each, with soft and with hard targets."""
        buckets = self.confidence_buckets() if buckets is None else buckets
        rows = []
        for (lo, hi), pool in buckets:
            row = {"interval": [lo, hi], "members_in_domain": float(np.mean(self.unlabeled.origin[pool.source_index] < self.labeled.num_classes)) if self.unlabeled.origin is not None else None}
            for mode in ("soft", "hard"):
                model = self.train_student(pool=pool, ratio=ratio, label_mode=mode)
                row[mode] = self.accuracy(model)
            rows.append(row)
        return {"supervised": self.accuracy(self.teacher), "buckets": rows}

    def robustness(self, models=None, baseline=None, fgsm_eps=None):
        """Corruption error, mCE, flip rates, mFR and FGSM/PGD accuracy for each model."""
        ev = self.config.eval
        models = models or {"teacher": self.teacher, "student": self.student}
        base_model, base_id = load_baseline(ev.baseline) if baseline is None else baseline
        kinds, sev = list(ev.corruption_kinds), list(ev.severities)
        base_err = corruption_error_matrix(base_model, self.test, kinds, sev, self.seed)
        seqs = perturbation_sequences(self.test, ev.perturbation_kinds, ev.frames, ev.perturb_images, self.seed)
        base_fp = flip_probability(base_model, seqs)
        eps_list = ev.fgsm_eps if fgsm_eps is None else fgsm_eps
        out = {"baseline_id": base_id}
        for name, model in models.items():
            err = corruption_error_matrix(model, self.test, kinds, sev, self.seed)
            fp = flip_probability(model, seqs)
            out[name] = {
                "top1": self.accuracy(model),
                "mce": mce(err, base_err),
                "mfr": mfr(fp, base_fp),
                "corruption_top1": float(1.0 - err.mean()),
                "flip_probability": fp,
                "fgsm": {f"{e:.6g}": adversarial_accuracy(model, self.test, e, "fgsm") for e in eps_list},
                "pgd": {f"{ev.pgd_eps:.6g}": adversarial_accuracy(model, self.test, ev.pgd_eps, "pgd", ev.pgd_steps, ev.pgd_step_size)},
            }
        return out

    def teacher_size(self, archs=("mlp-S", "mlp-L"), student_arch="mlp-L"):
        rows = {}
        for arch in archs:
            cfg = self._train_cfg(self.config.teacher.train)
            teacher = train_supervised(self.labeled, cfg, arch).model
            pool = make_pseudo_pool(teacher, self.unlabeled, self.config.pseudo, self.seed)
            student = self.train_student(pool=pool, arch=student_arch, teacher=teacher)
            rows[arch] = {"teacher": self.accuracy(teacher), "student": self.accuracy(student)}
        return rows

    def student_size(self, teacher_arch="mlp-S", archs=("mlp-S", "mlp-L")):
        teacher = train_supervised(self.labeled, self._train_cfg(self.config.teacher.train), teacher_arch).model
        pool = make_pseudo_pool(teacher, self.unlabeled, self.config.pseudo, self.seed)
        rows = {"teacher": self.accuracy(teacher)}
        for arch in archs:
            rows[arch] = self.accuracy(self.train_student(pool=pool, arch=arch, teacher=teacher))
        return rows

    def data_size(self, fractions=(0.25, 0.5, 1.0)):
        rows = {}
        for f in fractions:
            n = max(1, int(round(f * len(self.unlabeled))))
            sub = self.unlabeled.subset(np.arange(n))
            pool = make_pseudo_pool(self.teacher, sub, self.config.pseudo, self.seed)
            rows[f"{f:g}"] = self.accuracy(self.train_student(pool=pool))
        return rows

    def balancing(self):
        unbalanced = make_pseudo_pool(
            self.teacher, self.unlabeled, self.config.pseudo.model_copy(update={"balance": False}), self.seed
        )
        return {"balanced": self.accuracy(self.student), "unbalanced": self.accuracy(self.train_student(pool=unbalanced))}

    def ratio_study(self, ratios=(1, 3, 7, 14)):
        return {str(r): self.accuracy(self.train_student(ratio=r)) for r in ratios}

    def warm_start(self, epochs_grid=None):
        arch = self.config.teacher.arch
        return warm_start_student(self.teacher, self.labeled, self.pool, arch, self.student_cfg, epochs_grid, self.test)


STUDIES = {
    "noise": DeskRun.noise_study,
    "iterative": DeskRun.iterative,
    "teacher-size": DeskRun.teacher_size,
    "data-size": DeskRun.data_size,
    "soft-vs-hard": DeskRun.soft_vs_hard,
    "student-size": DeskRun.student_size,
    "balancing": DeskRun.balancing,
    "joint": DeskRun.joint_study,
    "ratio": DeskRun.ratio_study,
    "warm-start": DeskRun.warm_start,
}


def run_study(name, config: RunConfig, seeds):
    """Run study ``name`` for each seed; returns ``{"study", "seeds", "runs"}``."""
    if name not in STUDIES:
        raise ConfigError(f"unknown study {name!r}; choose from {sorted(STUDIES)}", "study")
    runs = [STUDIES[name](DeskRun(config, seed)) for seed in seeds]
    return {"study": name, "seeds": list(seeds), "runs": runs}
