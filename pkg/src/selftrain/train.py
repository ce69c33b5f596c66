"""Training: LR schedule, teacher and student loops, iteration, ablation baselines."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .augment import augment_batch
from .config import NoiseConfig, PseudoConfig, StageConfig, TrainConfig
from .data import DatasetStore, _Cycle, batch_iterator, single_iterator, steps_per_epoch
from .errors import ConfigError, DivergenceError, NonFiniteGradientError, NumericOverflowError
from .nn.functional import softmax_cross_entropy
from .nn.model import arch_rank, backward, build_model, forward
from .nn.optim import init_momentum, sgd_step
from .pseudo import balance, filter_confidence, generate_pseudo_labels
from .rng import derive_rng

log = logging.getLogger(__name__)

# absorbs float drift in epoch / interval at exact decay boundaries (4.8 / 2.4 etc.)
_FLOOR_EPS = 1e-9


def lr_at(epoch, config: TrainConfig):
    """``base_lr * (labeled_batch / lr_reference_batch) * lr_decay ** floor(epoch / interval)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    scale = config.base_lr * (config.labeled_batch / config.lr_reference_batch)
    return scale * config.lr_decay ** math.floor(epoch / config.decay_interval + _FLOOR_EPS)


def joint_loss(logits_l, targets_l, logits_p, targets_p, loss_mode="concat_mean"):
    """Loss and logit gradients for one labeled + pseudo batch.

    ``concat_mean`` averages cross entropy over all n + m rows;
    ``separate_means`` adds the labeled mean and the pseudo mean.
    Either part may be None. Returns ``(loss, grad_l, grad_p, mean_l, mean_p)``.
    """
    n = 0 if logits_l is None else len(logits_l)
    m = 0 if logits_p is None else len(logits_p)
    if n + m == 0:
        raise ValueError("empty batch")
    if loss_mode == "concat_mean":
        w_l = w_p = 1.0 / (n + m)
    elif loss_mode == "separate_means":
        w_l = 1.0 / n if n else 0.0
        w_p = 1.0 / m if m else 0.0
    else:
        raise ConfigError(f"unknown loss_mode {loss_mode!r}", "loss_mode")
    loss, grad_l, grad_p, mean_l, mean_p = 0.0, None, None, None, None
    if n:
        rows, grad_l = softmax_cross_entropy(logits_l, targets_l, w_l)
        loss += w_l * rows.sum()
        mean_l = float(rows.mean())
    if m:
        rows, grad_p = softmax_cross_entropy(logits_p, targets_p, w_p)
        loss += w_p * rows.sum()
        mean_p = float(rows.mean())
    return float(loss), grad_l, grad_p, mean_l, mean_p


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)  # one dict per epoch
    steps: int = 0


def _accuracy(model, store):
    from .robust import eval_topk

    return eval_topk(model, store, 1)


def _noised_forward(model, images, noise, seed, step, stream):
    rng_aug = derive_rng(seed, "aug", stream, step)
    rng_model = derive_rng(seed, "model-noise", stream, step)
    x = augment_batch(images, noise, rng_aug)
    return forward(model, x, noise, "train", rng_model)


def _fit(model, config: TrainConfig, batches, val=None, lr_offset=0.0):
    """Shared SGD loop over ``(epoch, frac, xl, tl, xp, tp)`` batches."""
    model = model.copy()
    model.sd_survival = config.noise.sd_final_survival if config.noise.enable_sd else 1.0
    velocity = init_momentum(model.params)
    same_noise = config.unlabeled_noise == config.noise
    history, last_good = [], model.copy()
    sums = None
    step = -1
    current = -1

    def close_epoch(epoch):
        rec = {
            "epoch": epoch + 1,
            "lr": lr_at(epoch + lr_offset, config),
            "train_loss_labeled": sums["l"] / sums["nl"] if sums["nl"] else None,
            "train_loss_pseudo": sums["p"] / sums["np"] if sums["np"] else None,
            "val_accuracy": _accuracy(model, val) if val is not None else None,
        }
        history.append(rec)
        log.debug("epoch %d %s", epoch + 1, rec)

    for step, (epoch, frac, xl, tl, xp, tp) in enumerate(batches):
        if epoch != current:
            if current >= 0:
                close_epoch(current)
                last_good = model.copy()
            current, sums = epoch, {"l": 0.0, "nl": 0, "p": 0.0, "np": 0}
        lr = lr_at(epoch + frac + lr_offset, config)
        try:
            n = 0 if xl is None else len(xl)
            if xl is not None and xp is not None and same_noise:
                logits, trace = _noised_forward(model, np.concatenate([xl, xp]), config.noise, config.seed, step, "joint")
                logit_l, logit_p = logits[:n], logits[n:]
            else:
                trace_l = trace_p = logit_l = logit_p = None
                if xl is not None:
                    logit_l, trace_l = _noised_forward(model, xl, config.noise, config.seed, step, "labeled")
                if xp is not None:
                    logit_p, trace_p = _noised_forward(model, xp, config.unlabeled_noise, config.seed, step, "pseudo")
            loss, g_l, g_p, mean_l, mean_p = joint_loss(logit_l, tl, logit_p, tp, config.loss_mode)
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite loss")
            if xl is not None and xp is not None and same_noise:
                grads = backward(model, trace, np.concatenate([g_l, g_p]))
            else:
                parts = [backward(model, t, g) for t, g in ((trace_l, g_l), (trace_p, g_p)) if t is not None]
                grads = parts[0]
                for extra in parts[1:]:
                    grads = [{k: a[k] + b[k] for k in a} for a, b in zip(grads, extra)]
            sgd_step(model.params, grads, lr, velocity, config.momentum)
        except (NumericOverflowError, NonFiniteGradientError, FloatingPointError) as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}", last_good, step) from exc
        if mean_l is not None:
            sums["l"] += mean_l
            sums["nl"] += 1
        if mean_p is not None:
            sums["p"] += mean_p
            sums["np"] += 1
    if current >= 0:
        close_epoch(current)
    return TrainResult(model, history, step + 1)


def _labeled_batches(labeled, config):
    spe = steps_per_epoch(len(labeled), config.labeled_batch)
    for epoch, step, _, x, t in single_iterator(labeled, config.labeled_batch, config.epochs, config.seed, "labeled-order"):
        yield epoch, (step - epoch * spe) / spe, x, t, None, None


def _mixed_batches(labeled, pseudo, config):
    spe = steps_per_epoch(len(labeled), config.labeled_batch)
    for b in batch_iterator(labeled, pseudo, config.labeled_batch, config.ratio, config.epochs, config.seed):
        yield b.epoch, (b.step - b.epoch * spe) / spe, b.labeled_images, b.labeled_targets, b.pseudo_images, b.pseudo_targets


def _pseudo_only_batches(pseudo, config, steps_each_epoch):
    """Pseudo stream alone, with the same step count and batch shape as joint training."""
    cycle = _Cycle(len(pseudo), derive_rng(config.seed, "pseudo-order"))
    targets = pseudo.target_matrix()
    size = config.labeled_batch * config.ratio
    for epoch in range(config.epochs):
        for j in range(steps_each_epoch):
            idx = cycle.take(size)
            yield epoch, j / steps_each_epoch, None, None, pseudo.images[idx], targets[idx]


def _check_labeled(labeled):
    if len(labeled) == 0:
        raise ValueError("labeled store is empty")
    if labeled.kind != "labeled":
        raise ValueError(f"expected a labeled store, got {labeled.kind!r}")


def train_supervised(labeled: DatasetStore, config: TrainConfig, arch="mlp-L", val=None, init=None):
    """Train on labeled data alone with the configured noise (the teacher stage).

    ``init`` overrides the seeded initialisation; 0 epochs returns it unchanged.
    """
    _check_labeled(labeled)
    model = init if init is not None else build_model(arch, labeled.image_shape, labeled.num_classes, derive_rng(config.seed, "init"))
    if config.epochs == 0:
        return TrainResult(model.copy())
    return _fit(model, config, _labeled_batches(labeled, config), val)


def train_student(labeled, pool, arch, config: TrainConfig, val=None, teacher=None, init=None):
    """Joint training on labeled images plus a pseudo-labeled pool.

    ``pool`` is a :class:`~selftrain.pseudo.PseudoPool` or a pseudo
    :class:`DatasetStore`; pools are turned into targets per ``config.label_mode``.
    """
    _check_labeled(labeled)
    pseudo = pool.as_store(config.label_mode) if hasattr(pool, "as_store") else pool
    if len(pseudo) == 0:
        raise ValueError("pseudo pool is empty")
    if teacher is not None and arch_rank(arch) < arch_rank(teacher.arch_id):
        warnings.warn(f"student {arch} is smaller than teacher {teacher.arch_id}", stacklevel=2)
    model = init if init is not None else build_model(arch, labeled.image_shape, labeled.num_classes, derive_rng(config.seed, "init"))
    if config.epochs == 0:
        return TrainResult(model.copy())
    return _fit(model, config, _mixed_batches(labeled, pseudo, config), val)


def make_pseudo_pool(teacher, unlabeled, pseudo_config: PseudoConfig, seed, teacher_noise: NoiseConfig = None):
    """Label, filter and balance ``unlabeled`` with ``teacher``.

    ``teacher_noise`` runs the teacher noised (ablation only).
    """
    rng = derive_rng(seed, "teacher-noise") if teacher_noise is not None else None
    pool = generate_pseudo_labels(teacher, unlabeled, noise=teacher_noise, rng=rng)
    pool = filter_confidence(pool, pseudo_config.tau)
    if pseudo_config.balance and len(pool):
        cap = pseudo_config.cap or max(1, len(unlabeled) // teacher.num_classes)
        pool = balance(pool, cap, derive_rng(seed, "balance"))
    return pool


@dataclass
class IterationResult:
    iteration: int  # 0 is the teacher
    model: object
    metrics: dict
    history: list


def iteration_config(base: TrainConfig, ratio, iteration):
    """Student config for plan position ``iteration`` (1-based): plan ratio, seed offset."""
    return base.model_copy(update={"ratio": ratio, "seed": base.seed + iteration - 1})


def iterate_noisy_student(
    labeled,
    unlabeled,
    teacher_config: StageConfig,
    plan,
    student_config: TrainConfig = None,
    pseudo_config: PseudoConfig = None,
    test=None,
    teacher=None,
    on_iteration=None,
    val=None,
):
    """Teacher, then one fresh student per plan entry, each relabeling with the latest model.

    Every student trains from scratch. ``teacher`` skips teacher training.
    ``on_iteration(result)`` is called as each model finishes. ``val`` is
    scored after every epoch for the logs.
    """
    if not plan:
        raise ConfigError("plan must contain at least one entry", "plan")
    student_config = student_config or TrainConfig()
    pseudo_config = pseudo_config or PseudoConfig()
    results = []

    def record(i, model, history, extra):
        metrics = {"iteration": i, "arch": model.arch_id, **extra}
        if test is not None:
            metrics["test_top1"] = _accuracy(model, test)
        res = IterationResult(i, model, metrics, history)
        results.append(res)
        if on_iteration is not None:
            on_iteration(res)
        return res

    if teacher is None:
        t = train_supervised(labeled, teacher_config.train, teacher_config.arch, val=val)
        current = record(0, t.model, t.history, {}).model
    else:
        current = record(0, teacher, [], {}).model
    for i, entry in enumerate(plan, start=1):
        cfg = iteration_config(entry.train or student_config, entry.ratio, i)
        pool = make_pseudo_pool(current, unlabeled, pseudo_config, cfg.seed)
        res = train_student(labeled, pool, entry.arch, cfg, val=val, teacher=current)
        extra = {"ratio": entry.ratio, "pool_size": len(pool), "pool_distinct": pool.distinct_count}
        current = record(i, res.model, res.history, extra).model
    return results


def pretrain_then_finetune(pool, labeled, config: TrainConfig, finetune_epoch_grid, arch="mlp-L", val=None):
    """Pretrain on pseudo labels only, then finetune on labeled data; keep the best grid value.

    Pretraining takes as many steps, with the same pseudo batch size, as
    joint training under ``config`` would. Each grid value finetunes a copy of
    the pretrained model for that many epochs (0 means no finetuning); the
    winner is chosen on ``val``. Returns ``(model, {epochs: val_accuracy})``.
    """
    grid = list(finetune_epoch_grid)
    if not grid:
        raise ConfigError("finetune_epoch_grid must not be empty", "finetune_epoch_grid")
    _check_labeled(labeled)
    pseudo = pool.as_store(config.label_mode) if hasattr(pool, "as_store") else pool
    if len(pseudo) == 0:
        raise ValueError("pseudo pool is empty")
    init = build_model(arch, labeled.image_shape, labeled.num_classes, derive_rng(config.seed, "init"))
    spe = steps_per_epoch(len(labeled), config.labeled_batch)
    pre = _fit(init, config, _pseudo_only_batches(pseudo, config, spe)).model if config.epochs else init
    scores, best = {}, None
    for g in grid:
        if g < 0:
            raise ConfigError("finetune epochs must be >= 0", "finetune_epoch_grid")
        ft = config.model_copy(update={"epochs": int(g)})
        model = train_supervised(labeled, ft, init=pre).model if g else pre.copy()
        scores[int(g)] = _accuracy(model, val) if val is not None else float("nan")
        if best is None or scores[int(g)] > best[0]:
            best = (scores[int(g)], model)
    return best[1], scores


WARM_START_FRACTIONS = (0.1, 0.2, 0.4, 0.8, 1.0)


def warm_start_student(teacher, labeled, pool, arch, config: TrainConfig, epochs_grid=None, test=None):
    """Students initialised from ``teacher`` for several epoch budgets, plus one from scratch.

    A budget of B epochs runs the last B epochs of the full schedule, so
    every run ends at the same decayed learning rate. Returns a report dict.
    """
    if arch != teacher.arch_id:
        raise ConfigError(f"warm start needs the teacher's arch {teacher.arch_id!r}, got {arch!r}", "arch")
    if epochs_grid is None:
        epochs_grid = sorted({max(1, round(f * config.epochs)) for f in WARM_START_FRACTIONS})
    pseudo = pool.as_store(config.label_mode) if hasattr(pool, "as_store") else pool
    rows = []
    for budget in epochs_grid:
        if not 0 <= budget <= config.epochs:
            raise ConfigError(f"budget {budget} outside 0..{config.epochs}", "epochs_grid")
        if budget == 0:
            model = teacher.copy()
        else:
            cfg = config.model_copy(update={"epochs": int(budget), "decay_interval_epochs": config.decay_interval})
            model = _fit(teacher, cfg, _mixed_batches(labeled, pseudo, cfg), lr_offset=config.epochs - budget).model
        rows.append({"epochs": int(budget), "warm_start": True, "top1": _accuracy(model, test) if test is not None else None})
    scratch = train_student(labeled, pseudo, arch, config).model
    rows.append({"epochs": config.epochs, "warm_start": False, "top1": _accuracy(scratch, test) if test is not None else None})
    return {"teacher_top1": _accuracy(teacher, test) if test is not None else None, "runs": rows}
