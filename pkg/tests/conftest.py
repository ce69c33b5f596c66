import numpy as np
import pytest

from selftrain.config import NoiseConfig, TrainConfig
from selftrain.data import synth_generate
from selftrain.nn.model import LayerSpec, Model, backward, forward, init_params, replay


def small_model(kind, rng, num_classes=4, input_shape=(5, 5, 2), sd_survival=1.0):
    """Narrow networks covering every layer kind, cheap enough for full finite differences."""
    if kind == "dense":
        layers = [
            LayerSpec("dense", 6, "relu"),
            LayerSpec("residual-block", 6, "relu"),
            LayerSpec("residual-block", 6, "relu"),
            LayerSpec("dropout"),
            LayerSpec("softmax-head", num_classes),
        ]
    else:
        layers = [
            LayerSpec("conv3x3", 3, "relu"),
            LayerSpec("residual-block", 3, "relu"),
            LayerSpec("global-pool"),
            LayerSpec("dense", 5, "none"),
            LayerSpec("dropout"),
            LayerSpec("softmax-head", num_classes),
        ]
    params = init_params(layers, input_shape, rng)
    # zero biases put dead units exactly on the relu kink, where central differences halve the slope
    for p in params:
        for name, v in p.items():
            if name.startswith("b"):
                v += rng.normal(scale=0.1, size=v.shape)
    return Model(kind, input_shape, num_classes, layers, params, sd_survival)


NOISY = NoiseConfig(sd_final_survival=0.5, dropout_rate=0.3, enable_aug=False)


def fd_relative_error(model, x, seed):
    """Max relative error between backprop and central differences over all parameters and the input."""
    rng = np.random.default_rng(seed)
    logits, trace = forward(model, x, NOISY, "train", rng)
    R = rng.normal(size=logits.shape)
    grads, dx = backward(model, trace, R, need_input_grad=True)

    def loss(m, inp):
        return float(np.sum(replay(m, inp, trace)[0] * R))

    h = 1e-6
    worst = 0.0
    for i, p in enumerate(model.params):
        for name, arr in p.items():
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss(model, x)
                arr[idx] = old - h
                down = loss(model, x)
                arr[idx] = old
                num[idx] = (up - down) / (2 * h)
            worst = max(worst, np.linalg.norm(num - grads[i][name]) / max(np.linalg.norm(num) + np.linalg.norm(grads[i][name]), 1e-12))
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (loss(model, xp) - loss(model, xm)) / (2 * h)
    worst = max(worst, np.linalg.norm(num - dx) / max(np.linalg.norm(num) + np.linalg.norm(dx), 1e-12))
    return worst


@pytest.fixture
def tiny_data():
    labeled, unlabeled, test, _ = synth_generate(4, 6, 200, 0.7, 8, seed=5, test_total=80, prototype_seed=0)
    return labeled, unlabeled, test


@pytest.fixture
def fast_config():
    return TrainConfig(
        labeled_batch=8,
        epochs=6,
        base_lr=0.05,
        lr_reference_batch=8,
        ratio=2,
        noise=NoiseConfig(augment_policy="standard"),
        seed=11,
    )


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
