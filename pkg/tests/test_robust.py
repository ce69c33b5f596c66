import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain.config import CORRUPTION_KINDS, PERTURBATION_KINDS, EvalConfig
from selftrain.data import DatasetStore
from selftrain.errors import ConfigError, UndefinedNormalizationError
from selftrain.nn.functional import softmax
from selftrain.nn.model import LayerSpec, Model, build_model, zero_model
from selftrain.robust import (
    CORRUPTION_TABLE,
    PerturbationSequence,
    corrupt,
    corrupt_batch,
    corruption_error_matrix,
    eval_topk,
    evaluate_robustness,
    fgsm,
    flip_probability,
    input_gradient,
    load_baseline,
    mce,
    mfr,
    perturb_sequence,
    perturbation_sequences,
    pgd,
    predict_logits,
    topk_hits,
)


def linear_head(W, b, shape):
    return Model("hand", shape, W.shape[1], [LayerSpec("softmax-head", W.shape[1])], [{"W": W, "b": b}])


def probe_image(seed=0, side=16):
    from scipy import ndimage

    raw = np.random.default_rng(seed).random((side, side, 1))
    return np.clip(0.2 + 0.6 * ndimage.gaussian_filter(raw, 1.0) + 0.1 * raw, 0, 1)


@pytest.fixture(scope="module")
def small_test():
    rng = np.random.default_rng(0)
    y = np.arange(40) % 4
    return DatasetStore(rng.random((40, 6, 6, 1)), 4, "labeled", y)


@pytest.fixture(scope="module")
def net():
    return build_model("mlp-S", (6, 6, 1), 4, np.random.default_rng(1))


# accuracy


def test_topk_k_equals_K_is_perfect(small_test, net):
    assert eval_topk(net, small_test, 4) == 1.0


def test_zero_model_predicts_class_zero(small_test, net):
    assert eval_topk(zero_model(net), small_test, 1) == pytest.approx(np.mean(small_test.labels == 0))


def test_topk_hand_count():
    logits = np.array([[0.1, 0.9, 0.0], [0.5, 0.5, 0.2], [0.3, 0.2, 0.4]])
    labels = np.array([1, 1, 0])
    assert topk_hits(logits, labels, 1).tolist() == [True, False, False]
    assert topk_hits(logits, labels, 2).tolist() == [True, True, True]


def test_topk_errors(small_test, net):
    with pytest.raises(ConfigError):
        eval_topk(net, small_test, 5)
    with pytest.raises(ValueError):
        eval_topk(net, small_test.as_unlabeled(), 1)


# corruptions


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_severity_zero_is_identity(kind):
    img = probe_image()
    assert np.array_equal(corrupt(img, kind, 0, seed=3), img)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_severity_monotone_distortion(kind):
    for seed in range(3):
        img = probe_image(seed)
        energy = [np.mean((corrupt(img, kind, s, seed) - img) ** 2) for s in range(6)]
        assert all(a <= b + 1e-15 for a, b in zip(energy, energy[1:])), energy
        assert energy[5] > 0


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_corruption_deterministic_and_in_range(kind):
    img = probe_image(1)
    a, b = corrupt(img, kind, 3, 9), corrupt(img, kind, 3, 9)
    assert np.array_equal(a, b)
    assert a.shape == img.shape and a.min() >= 0.0 and a.max() <= 1.0


def test_brightness_shift_matches_table():
    img = np.full((4, 4, 1), 0.3)
    out = corrupt(img, "brightness", 3, 0)
    assert abs(np.mean(out - img) - CORRUPTION_TABLE["brightness"][3]) < 1e-9


def test_unknown_corruption():
    with pytest.raises(ConfigError):
        corrupt(probe_image(), "frost", 1, 0)
    with pytest.raises(ConfigError):
        corrupt(probe_image(), "fog-lite", 6, 0)


def test_error_matrix_matches_per_cell_loop(small_test, net):
    kinds, sev = ["gaussian-noise", "contrast"], [1, 4]
    got = corruption_error_matrix(net, small_test, kinds, sev, seed=2)
    for i, k in enumerate(kinds):
        for j, s in enumerate(sev):
            wrong = 0
            for x, y in zip(corrupt_batch(small_test.images, k, s, 2), small_test.labels):
                wrong += int(np.argmax(predict_logits(net, x[None])[0]) != y)
            assert got[i, j] == pytest.approx(wrong / len(small_test), abs=1e-12)


def test_perfect_model_at_severity_zero():
    W = np.zeros((4, 2))
    W[0, 0] = W[1, 1] = 5.0
    x = np.zeros((6, 2, 2, 1))
    y = np.array([0, 1, 0, 1, 0, 1])
    x[y == 0, 0, 0, 0] = 1.0
    x[y == 1, 0, 1, 0] = 1.0
    head = linear_head(W, np.zeros(2), (2, 2, 1))
    err = corruption_error_matrix(head, DatasetStore(x, 2, "labeled", y), ["brightness", "pixelate"], [0], 0)
    assert np.array_equal(err, np.zeros((2, 1)))


def test_mce_identities():
    E = np.random.default_rng(0).uniform(0.1, 0.9, (10, 5))
    assert mce(E, E) == 100.0
    assert mce(E / 2, E) == pytest.approx(50.0, abs=1e-12)
    with pytest.raises(UndefinedNormalizationError):
        mce(E, np.zeros_like(E))
    with pytest.raises(ValueError):
        mce(E[:2], E)


# perturbations


def test_translate_sequence_pixel_map():
    img = probe_image(2, side=8)
    seq = perturb_sequence(img, "translate", 4, seed=0)
    assert np.array_equal(seq.frames[0], img)
    for i in range(1, 4):
        expect = np.full_like(img, 0.5)
        expect[:, i:] = img[:, :-i]
        np.testing.assert_allclose(seq.frames[i], expect, atol=1e-12)


@pytest.mark.parametrize("kind", PERTURBATION_KINDS)
def test_sequences_start_clean_and_grow(kind):
    img = probe_image(3)
    seq = perturb_sequence(img, kind, 6, seed=1)
    assert np.array_equal(seq.frames[0], img)
    delta = [np.mean((f - img) ** 2) for f in seq.frames]
    assert delta[-1] > 0
    assert np.array_equal(perturb_sequence(img, kind, 6, seed=1).frames, seq.frames)


def test_two_frame_sequence():
    seq = perturb_sequence(probe_image(), "brightness", 2, 0)
    assert len(seq.frames) == 2
    with pytest.raises(ValueError):
        perturb_sequence(probe_image(), "brightness", 1, 0)


def _pattern_model():
    # predicts class 1 when the single pixel is above 0.5, class 0 otherwise
    W = np.array([[-10.0, 10.0]])
    return linear_head(W, np.array([5.0, -5.0]), (1, 1, 1))


def test_flip_probability_counts():
    model = _pattern_model()
    frames = lambda vals: PerturbationSequence("brightness", np.array(vals, dtype=float).reshape(-1, 1, 1, 1))
    assert flip_probability(model, [frames([0.1, 0.2, 0.3])]) == {"brightness": 0.0}
    assert flip_probability(model, [frames([0.1, 0.9, 0.1, 0.9])]) == {"brightness": 1.0}
    assert flip_probability(model, [frames([0.1, 0.2, 0.9])]) == {"brightness": 0.5}


def test_mfr_identities():
    F = {k: v for k, v in zip(PERTURBATION_KINDS, [0.1, 0.2, 0.3, 0.05, 0.4])}
    assert mfr(F, F) == 100.0
    assert mfr({k: v / 2 for k, v in F.items()}, F) == pytest.approx(50.0, abs=1e-12)
    with pytest.raises(UndefinedNormalizationError):
        mfr([0.1], [0.0])


def test_perturbation_sequences_layout(small_test):
    seqs = perturbation_sequences(small_test, ["rotate", "translate"], frames=3, n_images=5, seed=0)
    assert [s.kind for s in seqs] == ["rotate"] * 5 + ["translate"] * 5


# attacks


def test_fgsm_eps_zero_is_identity(small_test, net):
    x = small_test.images[:8]
    assert np.array_equal(fgsm(net, x, small_test.labels[:8], 0.0), x)


def test_linear_gradient_sign_matches_analytic():
    rng = np.random.default_rng(5)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    head = linear_head(W, b, (2, 2, 1))
    x = rng.random((5, 2, 2, 1))
    y = np.array([0, 1, 2, 1, 0])
    p = softmax(x.reshape(5, 4) @ W + b)
    p[np.arange(5), y] -= 1.0
    analytic = (p @ W.T) / 5
    g = input_gradient(head, x, y).reshape(5, 4)
    np.testing.assert_allclose(g, analytic, rtol=1e-10, atol=1e-14)
    assert np.array_equal(np.sign(g), np.sign(analytic))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.3), st.integers(1, 6), st.integers(0, 1000))
def test_attack_bounds(eps, steps, seed):
    net = build_model("mlp-S", (6, 6, 1), 4, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    x, y = rng.random((10, 6, 6, 1)), rng.integers(0, 4, 10)
    for adv in (fgsm(net, x, y, eps), pgd(net, x, y, eps, steps)):
        assert np.max(np.abs(adv - x)) <= eps
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_pgd_single_full_step_is_fgsm(small_test, net):
    x, y = small_test.images, small_test.labels
    for eps in (1 / 255, 8 / 255, 0.2):
        assert np.array_equal(pgd(net, x, y, eps, steps=1, step_size=eps), fgsm(net, x, y, eps))


# baseline and report


def test_shipped_baseline_loads():
    model, ident = load_baseline()
    assert model.arch_id == "mlp-S" and model.input_shape == (28, 28, 1)
    assert ident.startswith("shipped:baseline_mlp-S.ckpt@sha256:c1b1df5460d4f6b9")


def test_report_against_itself_normalises_to_100(small_test, net):
    # sharpen the random net so every perturbation kind flips something
    sharp = net.copy()
    for p in sharp.params:
        for v in p.values():
            v *= 40.0
    cfg = EvalConfig(corruption_kinds=("gaussian-noise", "contrast"), severities=(1, 5), frames=6, perturb_images=40, fgsm_eps=(0.0, 0.1))
    report = evaluate_robustness(sharp, small_test, sharp, "self", cfg, seed=0)
    assert report.mfr == 100.0
    assert report.mce == 100.0
    assert report.fgsm["0"] == report.clean_top1
    assert '"baseline_id": "self"' in report.to_json()
