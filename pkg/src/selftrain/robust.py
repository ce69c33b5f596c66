"""Evaluation: top-k accuracy, corruption error (mCE), flip rate (mFR), FGSM and PGD.

Corruption and perturbation strengths are the explicit tables below; every
transform is a deterministic function of (image, kind, severity, seed).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import kernels
from .config import CORRUPTION_KINDS, PERTURBATION_KINDS
from .errors import ConfigError, UndefinedNormalizationError
from .nn.checkpoint import parse_checkpoint
from .nn.functional import one_hot, softmax_cross_entropy
from .nn.model import backward, forward
from .rng import derive_rng

# severity 0 is the identity; 1..5 are the graded levels
CORRUPTION_TABLE = {
    "gaussian-noise": (0.0, 0.04, 0.08, 0.12, 0.18, 0.26),  # pixel sigma
    "shot-noise": (0.0, 0.06, 0.10, 0.14, 0.20, 0.28),  # sigma per sqrt(intensity)
    "defocus-blur": (0.0, 0.5, 0.8, 1.1, 1.5, 2.0),  # isotropic blur sigma, pixels
    "motion-blur": (0.0, 1.0, 1.5, 2.0, 3.0, 4.0),  # horizontal blur sigma, pixels
    "snow-lite": (0.0, 0.02, 0.04, 0.07, 0.10, 0.15),  # fraction of pixels turned white
    "fog-lite": (0.0, 0.15, 0.30, 0.45, 0.60, 0.75),  # blend weight of a smooth fog field
    "brightness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
    "contrast": (1.0, 0.75, 0.6, 0.45, 0.3, 0.15),  # contrast factor about the image mean
    "pixelate": (1, 2, 4, 8, 16, 32),  # block size, pixels (nested partitions)
    "jpeg-lite": (15, 8, 6, 4, 3, 2),  # keep 8x8 DCT coefficients with u + v < value
}

# per-frame step for perturbation sequences; frame i uses i * step
PERTURBATION_STEP = {
    "gaussian-noise": 0.02,  # pixel sigma
    "translate": 1.0,  # pixels, horizontal
    "rotate": 2.0,  # degrees
    "brightness": 0.03,  # additive shift
    "scale-lite": 0.03,  # zoom factor increment
}

FILL = 0.5


# -- prediction and accuracy --------------------------------------------------


def predict_logits(model, images, batch_size=1000):
    images = np.asarray(images, dtype=np.float64)
    out = [forward(model, images[i : i + batch_size], mode="infer")[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def top1(logits):
    return np.argmax(logits, axis=1)


def topk_hits(logits, labels, k):
    """Whether each true label ranks in the top ``k`` (ties rank lower indices first)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    true = logits[np.arange(len(labels)), labels][:, None]
    cls = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (cls < labels[:, None])).sum(axis=1)
    return rank < k


def eval_topk(model, test, k=1):
    """Fraction of ``test`` whose label is among the ``k`` highest logits."""
    if not 1 <= k <= model.num_classes:
        raise ConfigError(f"k must lie in 1..{model.num_classes}, got {k}", "k")
    if test.kind != "labeled":
        raise ValueError("eval_topk needs a labeled store")
    if len(test) == 0:
        return float("nan")
    return float(np.mean(topk_hits(predict_logits(model, test.images), test.labels, k)))


# -- corruptions ----------------------------------------------------------------


def _pixelate(x, block):
    if block <= 1:
        return x.copy()
    n, H, W, C = x.shape
    out = np.empty_like(x)
    for y0 in range(0, H, block):
        for x0 in range(0, W, block):
            cell = x[:, y0 : y0 + block, x0 : x0 + block]
            out[:, y0 : y0 + block, x0 : x0 + block] = cell.mean(axis=(1, 2), keepdims=True)
    return out


def _jpeg_lite(x, keep):
    n, H, W, C = x.shape
    ph, pw = -H % 8, -W % 8
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    Hp, Wp = xp.shape[1], xp.shape[2]
    blocks = xp.reshape(n, Hp // 8, 8, Wp // 8, 8, C)
    coef = sfft.dctn(blocks, axes=(2, 4), norm="ortho")
    u = np.arange(8)
    mask = (u[:, None] + u[None, :]) < keep
    coef *= mask[None, None, :, None, :, None]
    rec = sfft.idctn(coef, axes=(2, 4), norm="ortho").reshape(n, Hp, Wp, C)
    return np.clip(rec[:, :H, :W], 0.0, 1.0)


def _fog_field(shape, rng):
    n, H, W, C = shape
    raw = rng.normal(size=(n, H, W, 1))
    field_ = ndimage.gaussian_filter(raw, (0, H / 4.0, W / 4.0, 0), mode="wrap")
    lo = field_.min(axis=(1, 2, 3), keepdims=True)
    hi = field_.max(axis=(1, 2, 3), keepdims=True)
    return np.broadcast_to((field_ - lo) / np.maximum(hi - lo, 1e-12), shape)


def corrupt_batch(images, kind, severity, seed):
    """Corrupt N x H x W x C images at ``severity`` (0 = identity, 1..5 graded).

    Random fields depend on (seed, kind) only, not on severity, so the same
    noise pattern is scaled up as severity grows.
    """
    if kind not in CORRUPTION_TABLE:
        raise ConfigError(f"unknown corruption {kind!r}")
    if not 0 <= severity <= 5:
        raise ConfigError(f"severity must lie in 0..5, got {severity}")
    x = np.asarray(images, dtype=np.float64)
    v = CORRUPTION_TABLE[kind][severity]
    if severity == 0:
        return x.copy()
    rng = derive_rng(seed, "corrupt", kind)
    if kind == "gaussian-noise":
        return np.clip(x + v * rng.normal(size=x.shape), 0.0, 1.0)
    if kind == "shot-noise":
        return np.clip(x + v * np.sqrt(x) * rng.normal(size=x.shape), 0.0, 1.0)
    if kind == "defocus-blur":
        return ndimage.gaussian_filter(x, (0, v, v, 0), mode="reflect")
    if kind == "motion-blur":
        return ndimage.gaussian_filter1d(x, v, axis=2, mode="reflect")
    if kind == "snow-lite":
        u = rng.random(x.shape[:3] + (1,))
        return np.where(u < v, 1.0, x)
    if kind == "fog-lite":
        return (1.0 - v) * x + v * _fog_field(x.shape, rng)
    if kind == "brightness":
        return np.clip(x + v, 0.0, 1.0)
    if kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        return mean + v * (x - mean)
    if kind == "pixelate":
        return _pixelate(x, int(v))
    return _jpeg_lite(x, int(v))


def corrupt(image, kind, severity, seed):
    return corrupt_batch(np.asarray(image)[None], kind, severity, seed)[0]


def corruption_error_matrix(model, test, kinds=CORRUPTION_KINDS, severities=(1, 2, 3, 4, 5), seed=0):
    """Top-1 error on corrupted copies of ``test``: array of shape (kinds, severities)."""
    if not kinds or not severities:
        raise ValueError("kinds and severities must be non-empty")
    errors = np.empty((len(kinds), len(severities)))
    for i, kind in enumerate(kinds):
        for j, s in enumerate(severities):
            corrupted = corrupt_batch(test.images, kind, s, seed)
            errors[i, j] = 1.0 - np.mean(top1(predict_logits(model, corrupted)) == test.labels)
    return errors


def mce(model_errors, baseline_errors):
    """Mean over kinds of ``100 * sum_s model_err / sum_s baseline_err``."""
    m = np.asarray(model_errors, dtype=np.float64)
    b = np.asarray(baseline_errors, dtype=np.float64)
    if m.shape != b.shape:
        raise ValueError(f"error matrices differ in shape: {m.shape} vs {b.shape}")
    denom = b.sum(axis=1)
    if np.any(denom <= 0):
        raise UndefinedNormalizationError(f"baseline has zero error for kind rows {np.flatnonzero(denom <= 0).tolist()}")
    return float(np.mean(m.sum(axis=1) / denom * 100.0))


# -- perturbation sequences -----------------------------------------------------


@dataclass
class PerturbationSequence:
    kind: str
    frames: np.ndarray  # F x H x W x C, frame 0 clean


def _zoom_coeffs(z, H, W):
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    return (1.0 / z, 0.0, cy - cy / z, 0.0, 1.0 / z, cx - cx / z)


def perturb_sequence(image, kind, frames, seed, index=0):
    """``frames`` images where frame ``i`` applies ``kind`` at ``i`` steps of strength.

    ``index`` separates the noise streams of different source images under one seed.
    """
    if kind not in PERTURBATION_STEP:
        raise ConfigError(f"unknown perturbation {kind!r}")
    if frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    x = np.asarray(image, dtype=np.float64)
    H, W = x.shape[:2]
    step = PERTURBATION_STEP[kind]
    out = np.empty((frames,) + x.shape)
    if kind == "gaussian-noise":
        z = derive_rng(seed, "perturb", kind, index).normal(size=x.shape)
        for i in range(frames):
            out[i] = np.clip(x + i * step * z, 0.0, 1.0)
    elif kind == "brightness":
        for i in range(frames):
            out[i] = np.clip(x + i * step, 0.0, 1.0)
    else:
        coeffs = []
        for i in range(frames):
            if kind == "translate":
                coeffs.append((1.0, 0.0, 0.0, 0.0, 1.0, -i * step))
            elif kind == "rotate":
                t = np.radians(i * step)
                c, s = np.cos(t), np.sin(t)
                cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
                coeffs.append((c, s, cy - c * cy - s * cx, -s, c, cx + s * cy - c * cx))
            else:
                coeffs.append(_zoom_coeffs(1.0 + i * step, H, W))
        stack = np.ascontiguousarray(np.broadcast_to(x, (frames,) + x.shape))
        out = kernels.affine_warp(stack, np.array(coeffs, dtype=np.float64), FILL)
        out[0] = x
    return PerturbationSequence(kind, out)


def flip_probability(model, sequences):
    """Per kind: fraction of consecutive frame pairs whose top-1 prediction changes.

    Averaged first within each sequence, then over the sequences of a kind.
    """
    per_kind = {}
    for seq in sequences:
        if len(seq.frames) < 2:
            raise ValueError("each sequence needs at least 2 frames")
        pred = top1(predict_logits(model, seq.frames))
        per_kind.setdefault(seq.kind, []).append(float(np.mean(pred[1:] != pred[:-1])))
    return {k: float(np.mean(v)) for k, v in per_kind.items()}


def perturbation_sequences(store, kinds=PERTURBATION_KINDS, frames=10, n_images=200, seed=0):
    count = min(n_images, len(store))
    return [
        perturb_sequence(store.images[i], kind, frames, seed, i)
        for kind in kinds
        for i in range(count)
    ]


def mfr(model_fp, baseline_fp):
    """Mean over kinds of ``100 * model_fp / baseline_fp``; accepts dicts or sequences."""
    if isinstance(model_fp, dict):
        kinds = list(model_fp)
        m = np.array([model_fp[k] for k in kinds])
        b = np.array([baseline_fp[k] for k in kinds])
    else:
        m, b = np.asarray(model_fp, dtype=np.float64), np.asarray(baseline_fp, dtype=np.float64)
    if np.any(b <= 0):
        raise UndefinedNormalizationError("baseline flip probability is zero for some perturbation")
    return float(np.mean(m / b * 100.0))


# -- adversarial attacks --------------------------------------------------------


def input_gradient(model, images, labels):
    """Gradient of the mean cross entropy with respect to the input pixels (clean model)."""
    logits, trace = forward(model, images, mode="infer")
    _, g = softmax_cross_entropy(logits, one_hot(labels, model.num_classes))
    _, dx = backward(model, trace, g, need_input_grad=True)
    return dx


def _into_ball(adv, x, eps):
    # x + eps can round so that (x + eps) - x exceeds eps by an ulp; step those pixels back toward x
    over = np.abs(adv - x) > eps
    while np.any(over):
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > eps
    return adv


def fgsm(model, images, labels, eps):
    """One signed-gradient step of size ``eps`` per pixel, clipped to [0, 1]."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(images, dtype=np.float64)
    return _into_ball(np.clip(x + eps * np.sign(input_gradient(model, x, labels)), 0.0, 1.0), x, eps)


def pgd(model, images, labels, eps, steps=10, step_size=None):
    """Iterated signed-gradient ascent projected onto the eps ball and the [0, 1] box.

    Starts from the clean image; ``steps=1, step_size=eps`` reproduces :func:`fgsm`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0 = np.asarray(images, dtype=np.float64)
    step_size = eps / 4.0 if step_size is None else step_size
    lo, hi = x0 - eps, x0 + eps
    x = x0.copy()
    for _ in range(steps):
        x = x + step_size * np.sign(input_gradient(model, x, labels))
        x = np.minimum(np.maximum(x, lo), hi)
        x = _into_ball(np.clip(x, 0.0, 1.0), x0, eps)
    return x


def adversarial_accuracy(model, test, eps, attack="fgsm", steps=10, step_size=None, batch_size=500):
    hits = []
    for i in range(0, len(test), batch_size):
        xb, yb = test.images[i : i + batch_size], test.labels[i : i + batch_size]
        if attack == "fgsm":
            adv = fgsm(model, xb, yb, eps)
        elif attack == "pgd":
            adv = pgd(model, xb, yb, eps, steps, step_size)
        else:
            raise ConfigError(f"unknown attack {attack!r}")
        hits.append(top1(predict_logits(model, adv)) == yb)
    return float(np.mean(np.concatenate(hits)))


# -- reference baseline and report ----------------------------------------------

BASELINE_ASSET = "baseline_mlp-S.ckpt"


def load_baseline(path=None):
    """The frozen normalisation model; returns ``(model, baseline_id)``."""
    if path is None or path == "shipped":
        data = resources.files("selftrain").joinpath("assets", BASELINE_ASSET).read_bytes()
        name = f"shipped:{BASELINE_ASSET}"
    else:
        with open(path, "rb") as fh:
            data = fh.read()
        name = str(path)
    model, _ = parse_checkpoint(data)
    return model, f"{name}@sha256:{hashlib.sha256(data).hexdigest()[:16]}"


@dataclass
class RobustnessReport:
    baseline_id: str
    corruption_kinds: list
    severities: list
    error_matrix: list
    baseline_error_matrix: list
    corruption_top1: float
    mce: float
    perturbation_kinds: list
    flip_probability: dict
    baseline_flip_probability: dict
    mfr: float
    clean_top1: float
    fgsm: dict = field(default_factory=dict)
    pgd: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_robustness(model, test, baseline, baseline_id, eval_config, seed=0):
    kinds, sev = list(eval_config.corruption_kinds), list(eval_config.severities)
    err = corruption_error_matrix(model, test, kinds, sev, seed)
    base_err = corruption_error_matrix(baseline, test, kinds, sev, seed)
    seqs = perturbation_sequences(test, eval_config.perturbation_kinds, eval_config.frames, eval_config.perturb_images, seed)
    fp = flip_probability(model, seqs)
    base_fp = flip_probability(baseline, seqs)
    fg = {f"{e:.6g}": adversarial_accuracy(model, test, e, "fgsm") for e in eval_config.fgsm_eps}
    pg = {
        f"{eval_config.pgd_eps:.6g}": adversarial_accuracy(
            model, test, eval_config.pgd_eps, "pgd", eval_config.pgd_steps, eval_config.pgd_step_size
        )
    }
    return RobustnessReport(
        baseline_id=baseline_id,
        corruption_kinds=kinds,
        severities=sev,
        error_matrix=err.tolist(),
        baseline_error_matrix=base_err.tolist(),
        corruption_top1=float(1.0 - err.mean()),
        mce=mce(err, base_err),
        perturbation_kinds=list(fp),
        flip_probability=fp,
        baseline_flip_probability=base_fp,
        mfr=mfr(fp, base_fp),
        clean_top1=eval_topk(model, test, 1),
        fgsm=fg,
        pgd=pg,
    )
