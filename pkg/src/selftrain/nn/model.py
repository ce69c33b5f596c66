"""Fixed-menu networks with hand-written backpropagation.

Layer kinds: ``dense``, ``conv3x3`` (stride 1, zero pad 1), ``residual-block``
(two dense or two conv layers with an identity shortcut), ``global-pool``,
``dropout`` and ``softmax-head`` (a dense layer producing logits). Images
enter as NHWC; conv stacks run internally in NCHW.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..config import NoiseConfig
from ..errors import NumericOverflowError, ShapeError, TraceMismatchError
from .functional import dropout_mask, survival_probability

LAYER_KINDS = ("dense", "conv3x3", "residual-block", "global-pool", "dropout", "softmax-head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("dense", "conv3x3", "residual-block", "softmax-head") and self.width < 1:
            raise ValueError(f"{self.kind} needs a positive width")


@dataclass
class Model:
    arch_id: str
    input_shape: tuple
    num_classes: int
    layers: list
    params: list
    # final-block survival probability the network was trained with; infer
    # mode scales residual branches by the matching linear-decay value
    sd_survival: float = 1.0
    _spatial: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.params) != len(self.layers):
            raise ShapeError("params list length does not match layers")
        if self.layers[-1].kind != "softmax-head" or self.layers[-1].width != self.num_classes:
            raise ShapeError("final layer must be a softmax-head of width num_classes", len(self.layers) - 1)
        for i, spec in enumerate(self.layers):
            if spec.kind == "dropout" and (i + 1 >= len(self.layers) or self.layers[i + 1].kind != "softmax-head"):
                raise ShapeError("dropout may only sit directly before the softmax head", i)
        self._spatial = _spatial_flags(self.layers)
        self._check_param_shapes()

    @property
    def residual_count(self):
        return sum(1 for s in self.layers if s.kind == "residual-block")

    @property
    def uses_conv(self):
        return self.layers[0].kind == "conv3x3"

    def copy(self):
        return Model(
            self.arch_id,
            self.input_shape,
            self.num_classes,
            list(self.layers),
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            self.sd_survival,
        )

    def parameter_count(self):
        return sum(v.size for p in self.params for v in p.values())

    def _check_param_shapes(self):
        H, W, C = self.input_shape
        width = C if self.uses_conv else H * W * C
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            spatial = self._spatial[i]
            if spec.kind in ("dense", "softmax-head"):
                expect = {"W": (width, spec.width), "b": (spec.width,)}
                width = spec.width
            elif spec.kind == "conv3x3":
                expect = {"W": (spec.width, width, 3, 3), "b": (spec.width,)}
                width = spec.width
            elif spec.kind == "residual-block":
                if spec.width != width:
                    raise ShapeError(f"residual block width {spec.width} != input width {width}", i)
                w = (width, width, 3, 3) if spatial else (width, width)
                expect = {"W1": w, "b1": (width,), "W2": w, "b2": (width,)}
            else:
                expect = {}
            got = {k: tuple(v.shape) for k, v in p.items()}
            if got != expect:
                raise ShapeError(f"parameter shapes {got} do not match {spec.kind} spec {expect}", i)


def _spatial_flags(layers):
    """Per layer: does its input still carry H x W structure?"""
    flags, spatial = [], layers[0].kind == "conv3x3"
    for spec in layers:
        if spec.kind == "conv3x3" and not spatial:
            raise ShapeError("conv3x3 cannot follow a flattening layer")
        flags.append(spatial)
        if spec.kind in ("global-pool", "dense", "softmax-head"):
            spatial = False
    if spatial:
        raise ShapeError("spatial features must be pooled before the head")
    return flags


def arch_layers(arch_id, num_classes):
    if arch_id == "mlp-S":
        return [LayerSpec("dense", 128, "relu"), LayerSpec("dropout"), LayerSpec("softmax-head", num_classes)]
    if arch_id == "mlp-L":
        return [
            LayerSpec("dense", 256, "relu"),
            LayerSpec("residual-block", 256, "relu"),
            LayerSpec("residual-block", 256, "relu"),
            LayerSpec("dropout"),
            LayerSpec("softmax-head", num_classes),
        ]
    m = re.fullmatch(r"resnetlite-([1-9][0-9]*)", arch_id)
    if m:
        blocks = int(m.group(1))
        return (
            [LayerSpec("conv3x3", 8, "relu")]
            + [LayerSpec("residual-block", 8, "relu") for _ in range(blocks)]
            + [LayerSpec("global-pool"), LayerSpec("dropout"), LayerSpec("softmax-head", num_classes)]
        )
    raise ValueError(f"unknown arch {arch_id!r}")


def arch_rank(arch_id):
    """Sort key for the equal-or-larger partial order over architectures."""
    if arch_id == "mlp-S":
        return (0, 0)
    if arch_id == "mlp-L":
        return (1, 0)
    m = re.fullmatch(r"resnetlite-([1-9][0-9]*)", arch_id)
    if m:
        return (2, int(m.group(1)))
    raise ValueError(f"unknown arch {arch_id!r}")


def init_params(layers, input_shape, rng):
    H, W, C = input_shape
    spatial = _spatial_flags(layers)
    width = C if spatial[0] else H * W * C
    params = []
    for spec, sp in zip(layers, spatial):
        if spec.kind == "dense":
            params.append({"W": rng.normal(0, np.sqrt(2.0 / width), (width, spec.width)), "b": np.zeros(spec.width)})
            width = spec.width
        elif spec.kind == "softmax-head":
            params.append({"W": rng.normal(0, np.sqrt(1.0 / width), (width, spec.width)), "b": np.zeros(spec.width)})
            width = spec.width
        elif spec.kind == "conv3x3":
            fan_in = width * 9
            params.append(
                {"W": rng.normal(0, np.sqrt(2.0 / fan_in), (spec.width, width, 3, 3)), "b": np.zeros(spec.width)}
            )
            width = spec.width
        elif spec.kind == "residual-block":
            shape = (width, width, 3, 3) if sp else (width, width)
            fan_in = width * 9 if sp else width
            params.append(
                {
                    "W1": rng.normal(0, np.sqrt(2.0 / fan_in), shape),
                    "b1": np.zeros(width),
                    # small second layer: blocks start close to identity
                    "W2": rng.normal(0, 0.5 * np.sqrt(1.0 / fan_in), shape),
                    "b2": np.zeros(width),
                }
            )
        else:
            params.append({})
    return params


def build_model(arch_id, input_shape, num_classes, rng):
    layers = arch_layers(arch_id, num_classes)
    return Model(arch_id, tuple(input_shape), num_classes, layers, init_params(layers, input_shape, rng))


# -- primitive affine maps (dense or conv) --------------------------------------


def _affine(x, W, b, spatial):
    if not spatial:
        return x @ W + b, x
    N, C, H, Wd = x.shape
    cols = kernels.im2col3x3(np.ascontiguousarray(x))
    z = cols @ W.reshape(W.shape[0], -1).T + b
    return z.reshape(N, H, Wd, W.shape[0]).transpose(0, 3, 1, 2), cols


def _affine_back(dz, W, cached, x_shape, spatial, need_dx=True):
    if not spatial:
        x = cached
        return x.T @ dz, dz.sum(axis=0), (dz @ W.T if need_dx else None)
    N, C, H, Wd = x_shape
    dzr = dz.transpose(0, 2, 3, 1).reshape(-1, W.shape[0])
    dW = (dzr.T @ cached).reshape(W.shape)
    if not need_dx:
        return dW, dzr.sum(axis=0), None
    dcols = np.ascontiguousarray(dzr @ W.reshape(W.shape[0], -1))
    return dW, dzr.sum(axis=0), kernels.col2im3x3(dcols, N, C, H, Wd)


def _relu(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


@dataclass
class ForwardTrace:
    """Activations and noise draws recorded by :func:`forward`.

    ``noise`` holds, per layer, the dropout mask or the residual gate vector
    actually used (None where the layer has no noise), so a forward pass can
    be replayed exactly with :func:`replay`.
    """

    model_id: int
    arch_id: str
    mode: str
    input_shape: tuple
    caches: list
    noise: list
    logits: np.ndarray = None


def _gate_vector(model, block_index, n, noise, train, rng):
    L = model.residual_count
    if train and noise.enable_sd and noise.sd_final_survival < 1.0:
        p = survival_probability(block_index, L, noise.sd_final_survival)
        return (rng.random(n) < p).astype(np.float64)
    # infer mode, or SD switched off: the deterministic expected branch
    p = survival_probability(block_index, L, model.sd_survival) if model.sd_survival < 1.0 else 1.0
    return np.full(n, p)


def _run(model, batch, noise, mode, rng, fixed_noise=None):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {model.input_shape}", 0)
    train = mode == "train"
    if noise is None:
        noise = NoiseConfig.clean()
    n = batch.shape[0]
    x = batch.transpose(0, 3, 1, 2) if model.uses_conv else batch.reshape(n, -1)
    caches, draws = [], []
    block = 0
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        spatial = model._spatial[i]
        draw = None
        if spec.kind in ("dense", "conv3x3", "softmax-head"):
            if not spatial and x.ndim != 2:
                x = x.reshape(n, -1)
            expected_in = p["W"].shape[1] if spatial else p["W"].shape[0]
            got_in = x.shape[1]
            if got_in != expected_in:
                raise ShapeError(f"input width {got_in} != expected {expected_in}", i)
            z, aux = _affine(x, p["W"], p["b"], spatial)
            out = _relu(z, spec.activation)
            caches.append((x.shape, aux, z))
        elif spec.kind == "residual-block":
            block += 1
            z1, aux1 = _affine(x, p["W1"], p["b1"], spatial)
            h = np.maximum(z1, 0.0)
            f, aux2 = _affine(h, p["W2"], p["b2"], spatial)
            if fixed_noise is not None:
                draw = fixed_noise[i]
            else:
                draw = _gate_vector(model, block, n, noise, train, rng)
            g = draw.reshape((n,) + (1,) * (f.ndim - 1))
            s = x + g * f
            out = _relu(s, spec.activation)
            caches.append((x.shape, aux1, z1, aux2, f, s))
        elif spec.kind == "global-pool":
            caches.append((x.shape,))
            out = x.mean(axis=(2, 3))
        elif spec.kind == "dropout":
            if fixed_noise is not None:
                draw = fixed_noise[i]
            elif train and noise.enable_dropout and noise.dropout_rate > 0:
                draw = dropout_mask(x.shape, noise.dropout_rate, rng)
            if draw is not None:
                out = x * draw
            else:
                out = x
            caches.append((x.shape,))
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError(i)
        draws.append(draw)
        x = out
    return x, caches, draws


def forward(model, batch, noise=None, mode="infer", rng=None):
    """Logits for an NHWC ``batch``; returns ``(logits, trace)``.

    Infer mode ignores ``noise`` and ``rng`` entirely. Train mode applies
    dropout and stochastic depth as enabled in ``noise`` (a disabled source
    behaves exactly as at inference). Input augmentation is not applied
    here; see :mod:`selftrain.augment`.
    """
    if mode == "infer":
        noise, rng = NoiseConfig.clean(), None
    logits, caches, draws = _run(model, batch, noise, mode, rng)
    trace = ForwardTrace(id(model), model.arch_id, mode, tuple(np.shape(batch)), caches, draws, logits)
    return logits, trace


def replay(model, batch, trace):
    """Re-run a forward pass reusing the noise draws recorded in ``trace``."""
    _check_trace(model, trace)
    logits, caches, draws = _run(model, batch, NoiseConfig.clean(), "train", None, fixed_noise=trace.noise)
    return logits, ForwardTrace(id(model), model.arch_id, trace.mode, tuple(np.shape(batch)), caches, draws, logits)


def _check_trace(model, trace):
    if trace.arch_id != model.arch_id or len(trace.caches) != len(model.layers):
        raise TraceMismatchError(
            f"trace from {trace.arch_id!r} ({len(trace.caches)} layers) does not fit model "
            f"{model.arch_id!r} ({len(model.layers)} layers)"
        )


def backward(model, trace, loss_grad, need_input_grad=False):
    """Parameter gradients given ``d loss / d logits``.

    Returns a list of ``{name: array}`` aligned with ``model.params``; with
    ``need_input_grad`` returns ``(grads, d loss / d batch)`` instead.
    """
    _check_trace(model, trace)
    dout = np.asarray(loss_grad, dtype=np.float64)
    if trace.logits is not None and dout.shape != trace.logits.shape:
        raise TraceMismatchError(f"loss_grad shape {dout.shape} != logits shape {trace.logits.shape}")
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        spec, p, cache = model.layers[i], model.params[i], trace.caches[i]
        spatial = model._spatial[i]
        if spec.kind in ("dense", "conv3x3", "softmax-head"):
            x_shape, aux, z = cache
            dz = dout * (z > 0) if spec.activation == "relu" else dout
            dW, db, dout = _affine_back(dz, p["W"], aux, x_shape, spatial, need_input_grad or i > 0)
            grads[i] = {"W": dW, "b": db}
        elif spec.kind == "residual-block":
            x_shape, aux1, z1, aux2, f, s = cache
            ds = dout * (s > 0) if spec.activation == "relu" else dout
            gate = trace.noise[i]
            g = gate.reshape((gate.shape[0],) + (1,) * (f.ndim - 1))
            df = ds * g
            h = np.maximum(z1, 0.0)
            dW2, db2, dh = _affine_back(df, p["W2"], aux2, h.shape, spatial)
            dz1 = dh * (z1 > 0)
            dW1, db1, dx = _affine_back(dz1, p["W1"], aux1, x_shape, spatial)
            grads[i] = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}
            dout = ds + dx
        elif spec.kind == "global-pool":
            (x_shape,) = cache
            hw = x_shape[2] * x_shape[3]
            dout = np.broadcast_to(dout[:, :, None, None] / hw, x_shape).copy()
            grads[i] = {}
        elif spec.kind == "dropout":
            mask = trace.noise[i]
            if mask is not None:
                dout = dout * mask
            grads[i] = {}
    if not need_input_grad:
        return grads
    shape = trace.input_shape
    if model.uses_conv:
        dx = dout.transpose(0, 2, 3, 1)
    else:
        dx = dout.reshape(shape)
    return grads, np.ascontiguousarray(dx)


def zero_model(model):
    """Copy of ``model`` with every parameter set to zero."""
    m = model.copy()
    for p in m.params:
        for v in p.values():
            v[...] = 0.0
    return m
