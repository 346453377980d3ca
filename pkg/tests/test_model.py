"""Core model math: kernel responses, gating, reconstruction, loss, gradients,
and the SMOE v1 file format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient, gradient_entries, random_image, random_model
from smoe.errors import DimensionMismatch, ModelEmpty, ParseError
from smoe.model import (
    Image,
    Kernel,
    SmoeModel,
    evaluate,
    gating_weights,
    kernel_value,
    load_model,
    loss_gradients,
    mse_loss,
    reconstruct,
    save_model,
)


def unit_kernel(mu=(0.0, 0.0), expert=1.0, alpha=1.0):
    return Kernel(mu=np.asarray(mu, float), cholA=np.eye(2), expert=expert, alpha=alpha)


def two_kernel_row(width=5, height=1):
    return SmoeModel(
        kernels=[unit_kernel((0.0, 0.0), expert=1.0), unit_kernel((4.0, 0.0), expert=0.0)],
        width=width,
        height=height,
    )


# -- kernel_value -----------------------------------------------------------


def test_kernel_value_at_center():
    assert kernel_value(unit_kernel(), (0.0, 0.0)) == 1.0


def test_kernel_value_unit_offset():
    assert kernel_value(unit_kernel(), (1.0, 0.0)) == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_kernel_value_zero_amplitude():
    assert kernel_value(unit_kernel(alpha=0.0), (3.7, -2.0)) == 0.0


def test_kernel_value_steered():
    k = Kernel(mu=(1.0, 2.0), cholA=np.array([[0.5, 0.0], [0.2, 0.7]]), expert=0.0, alpha=1.3)
    x = np.array([2.5, 1.0])
    d = x - np.array([1.0, 2.0])
    expected = 1.3 * math.exp(-float(d @ (k.cholA @ k.cholA.T) @ d))
    assert kernel_value(k, x) == pytest.approx(expected, rel=1e-12)


# -- evaluate ---------------------------------------------------------------


def test_evaluate_single_kernel_is_expert():
    model = SmoeModel([unit_kernel((3.0, 2.0), expert=0.5)], 8, 8)
    for x in [(0.0, 0.0), (3.0, 2.0), (7.0, 7.0)]:
        assert evaluate(model, x) == pytest.approx(0.5, abs=1e-15)


def test_evaluate_equidistant_symmetry():
    assert evaluate(two_kernel_row(), (2.0, 0.0)) == pytest.approx(0.5, abs=1e-12)


def test_evaluate_off_center_softmax():
    expected = math.exp(-1.0) / (math.exp(-1.0) + math.exp(-9.0))
    assert evaluate(two_kernel_row(), (1.0, 0.0)) == pytest.approx(expected, rel=1e-12)


def test_evaluate_empty_model_raises():
    with pytest.raises(ModelEmpty):
        evaluate(SmoeModel([], 4, 4), (0.0, 0.0))


def test_all_zero_alpha_falls_back_to_nearest_center():
    model = SmoeModel(
        [unit_kernel((1.0, 1.0), expert=0.2, alpha=0.0),
         unit_kernel((6.0, 6.0), expert=0.9, alpha=0.0)],
        8, 8,
    )
    assert evaluate(model, (0.0, 0.0)) == 0.2
    assert evaluate(model, (7.0, 7.0)) == 0.9


# -- reconstruct ------------------------------------------------------------


def test_reconstruct_single_kernel_constant():
    model = SmoeModel([unit_kernel((1.0, 2.0), expert=0.7)], 4, 4)
    img = reconstruct(model)
    assert img.width == 4 and img.height == 4
    np.testing.assert_allclose(img.pixels, 0.7, rtol=0, atol=1e-15)


def test_reconstruct_empty_model_raises():
    with pytest.raises(ModelEmpty):
        reconstruct(SmoeModel([], 4, 4))


def test_reconstruct_two_kernel_row_matches_scalar_oracle():
    model = two_kernel_row()
    img = reconstruct(model)
    # independent scalar evaluation per pixel
    for x in range(5):
        e1 = math.exp(-float(x * x))
        e2 = math.exp(-float((x - 4) ** 2))
        want = (1.0 * e1 + 0.0 * e2) / (e1 + e2)
        assert img.pixels[0, x] == pytest.approx(want, rel=1e-12)
    assert img.pixels[0, 2] == pytest.approx(0.5, abs=1e-12)
    # symmetric pattern about the center pixel
    np.testing.assert_allclose(
        img.pixels[0, :2], 1.0 - img.pixels[0, :2:-1], rtol=0, atol=1e-12
    )


def test_reconstruct_clamps_to_unit_range():
    model = SmoeModel([unit_kernel((1.0, 1.0), expert=1.8)], 4, 4)
    assert reconstruct(model).pixels.max() <= 1.0


# -- mse_loss ---------------------------------------------------------------


def test_mse_identical_is_zero():
    model = SmoeModel([unit_kernel((2.0, 2.0), expert=0.4)], 6, 6)
    assert mse_loss(model, Image(np.full((6, 6), 0.4))) == pytest.approx(0.0, abs=1e-28)


def test_mse_uniform_residual():
    model = SmoeModel([unit_kernel((2.0, 2.0), expert=0.6)], 6, 6)
    assert mse_loss(model, Image(np.full((6, 6), 0.5))) == pytest.approx(0.01, rel=1e-12)


def test_mse_matches_bruteforce_sum():
    rng = np.random.default_rng(3)
    model = random_model(rng, 4, 8, 8)
    target = random_image(rng, 8, 8)
    got = mse_loss(model, target)
    acc = 0.0
    for y in range(8):
        for x in range(8):
            acc += (evaluate(model, (float(x), float(y))) - target.pixels[y, x]) ** 2
    assert got == pytest.approx(acc / 64.0, rel=1e-12)


def test_mse_dimension_mismatch():
    model = SmoeModel([unit_kernel()], 6, 6)
    with pytest.raises(DimensionMismatch):
        mse_loss(model, Image(np.zeros((4, 6))))


# -- loss_gradients ---------------------------------------------------------


def test_gradients_zero_residual_experts():
    model = SmoeModel([unit_kernel((3.0, 3.0), expert=0.4)], 8, 8)
    grads = loss_gradients(model, Image(np.full((8, 8), 0.4)), reg_weight=0.0)
    np.testing.assert_allclose(grads.d_expert, 0.0, atol=1e-18)


def test_gradients_regularizer_only():
    # residual identically zero: every amplitude gradient is 2*reg*(sum alpha)
    alphas = [0.7, 1.4, 0.2]
    kernels = [unit_kernel((2.0 * i, 2.0), expert=0.5, alpha=a) for i, a in enumerate(alphas)]
    model = SmoeModel(kernels, 8, 8)
    grads = loss_gradients(model, Image(np.full((8, 8), 0.5)), reg_weight=0.25)
    want = 2.0 * 0.25 * sum(alphas)
    np.testing.assert_allclose(grads.d_alpha, want, rtol=1e-12)


def test_gradients_upper_triangle_pinned():
    rng = np.random.default_rng(5)
    grads = loss_gradients(random_model(rng, 3, 8, 8), random_image(rng, 8, 8), 0.1)
    np.testing.assert_array_equal(grads.d_cholA[:, 0, 1], 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, int(rng.integers(1, 9)), 16, 16)
    target = random_image(rng, 16, 16)
    reg = float(rng.choice([0.0, 0.2]))
    grads = loss_gradients(model, target, reg)
    for i in range(len(model.kernels)):
        for field, sub, got in gradient_entries(grads, i):
            want = fd_gradient(model, target, reg, i, field, sub)
            assert abs(got - want) <= max(1e-8, 1e-4 * max(abs(got), abs(want))), (
                f"kernel {i} {field}{sub}: analytic {got} vs fd {want}"
            )


def test_gradients_dimension_mismatch():
    model = SmoeModel([unit_kernel()], 6, 6)
    with pytest.raises(DimensionMismatch):
        loss_gradients(model, Image(np.zeros((4, 4))), 0.0)


def test_zero_alpha_kernel_alpha_gradient_matches_scalar_oracle():
    # Central differences are invalid at the amplitude boundary (alpha >= 0),
    # so the switched-off kernel's one-sided gradient is checked against a
    # direct per-pixel evaluation of the same formula instead.
    rng = np.random.default_rng(42)
    model = random_model(rng, 4, 12, 12)
    model.kernels[1].alpha = 0.0
    target = random_image(rng, 12, 12)
    reg = 0.2
    got = loss_gradients(model, target, reg).d_alpha[1]

    dead = model.kernels[1]
    acc = 0.0
    for y in range(12):
        for x in range(12):
            pt = np.array([float(x), float(y)])
            level = evaluate(model, pt)
            residual = level - target.pixels[y, x]
            denom = 0.0
            for k in model.kernels:
                if k.alpha > 0:
                    v = k.cholA.T @ (pt - k.mu)
                    denom += k.alpha * math.exp(-float(v @ v))
            v = dead.cholA.T @ (pt - dead.mu)
            phi = math.exp(-float(v @ v)) / denom
            acc += (2.0 / 144) * residual * (dead.expert - level) * phi
    want = acc + 2 * reg * sum(k.alpha for k in model.kernels)
    assert got == pytest.approx(want, rel=1e-12)


# -- gating properties ------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    k=st.integers(1, 7),
    px=st.floats(-5.0, 20.0),
    py=st.floats(-5.0, 20.0),
)
def test_partition_of_unity(seed, k, px, py):
    rng = np.random.default_rng(seed)
    model = random_model(rng, k, 16, 16)
    weights = gating_weights(model, [(px, py)])
    assert abs(weights.sum() - 1.0) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_alpha_scaling_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 4, 16, 16)
    scaled = SmoeModel(
        [Kernel(mu=k.mu, cholA=k.cholA, expert=k.expert, alpha=k.alpha * scale)
         for k in model.kernels],
        16, 16,
    )
    x = rng.uniform(0, 15, size=2)
    assert abs(evaluate(model, x) - evaluate(scaled, x)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(
    a11=st.floats(-3.0, 3.0),
    a21=st.floats(-3.0, 3.0),
    a22=st.floats(-3.0, 3.0),
)
def test_steering_matrix_positive_semidefinite(a11, a21, a22):
    k = Kernel(mu=(0.0, 0.0), cholA=np.array([[a11, 0.0], [a21, a22]]), expert=0.0)
    eigenvalues = np.linalg.eigvalsh(k.cholA @ k.cholA.T)
    assert eigenvalues.min() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_single_kernel_reconstruction_constant(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 1, 8, 8)
    np.testing.assert_allclose(
        reconstruct(model).pixels,
        np.clip(model.kernels[0].expert, 0.0, 1.0),
        rtol=0, atol=1e-12,
    )


def test_removing_zero_alpha_kernel_changes_nothing():
    rng = np.random.default_rng(9)
    model = random_model(rng, 4, 12, 12)
    model.kernels[2].alpha = 0.0
    full = reconstruct(model).pixels
    dropped = SmoeModel(
        [k for i, k in enumerate(model.kernels) if i != 2], 12, 12
    )
    np.testing.assert_array_equal(full, reconstruct(dropped).pixels)


# -- SMOE v1 serialization ---------------------------------------------------


def test_save_load_round_trip_exact(tmp_path):
    rng = np.random.default_rng(21)
    model = random_model(rng, 6, 32, 24)
    path = tmp_path / "model.smoe"
    save_model(model, path)
    loaded = load_model(path)
    assert (loaded.width, loaded.height) == (32, 24)
    assert len(loaded.kernels) == 6
    for a, b in zip(model.kernels, loaded.kernels):
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.cholA, b.cholA)
        assert a.expert == b.expert and a.alpha == b.alpha


def test_model_file_layout(tmp_path):
    model = SmoeModel([unit_kernel((1.0, 2.0), expert=0.5)], 3, 4)
    path = tmp_path / "m.smoe"
    save_model(model, path)
    raw = path.read_bytes().decode()
    lines = raw.split("\n")
    assert lines[0] == "SMOE v1"
    assert lines[1] == "3 4 1"
    assert len(lines[2].split()) == 7
    assert raw.endswith("\n")
    assert "\r" not in raw


@pytest.mark.parametrize(
    "content,line",
    [
        ("SMOE v2\n1 1 0\n", 1),
        ("SMOE v1\n1 1\n", 2),
        ("SMOE v1\nx y z\n", 2),
        ("SMOE v1\n4 4 2\n0 0 1 0 1 0.5 1\n", 4),  # truncated kernel list
        ("SMOE v1\n4 4 1\n0 0 1 0 1 0.5\n", 3),  # six fields
        ("SMOE v1\n4 4 1\n0 0 1 0 nan 0.5 1\n", 3),  # non-finite
    ],
)
def test_load_model_parse_errors(tmp_path, content, line):
    path = tmp_path / "bad.smoe"
    path.write_text(content)
    with pytest.raises(ParseError) as err:
        load_model(path)
    assert err.value.line == line
