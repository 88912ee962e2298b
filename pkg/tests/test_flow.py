import csv

import numpy as np
import pytest

from typoflow import flow
from typoflow.backbone import Model, ModelConfig
from typoflow.tokenizer import parse_prompt

TINY = dict(image_size=8, patch=4, d=16, heads=2, n_mm=1, n_single=1, d_txt=8, n_txt_layers=1,
            context=16, mlp_ratio=2)


def test_interpolation_endpoints_exact():
    rng = np.random.default_rng(0)
    x0 = rng.random((3, 4, 4, 3)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    assert flow.forward_interpolate(x0, eps, 0.0).tobytes() == x0.tobytes()
    assert flow.forward_interpolate(x0, eps, 1.0).tobytes() == eps.tobytes()
    assert flow.forward_interpolate(np.array([2.0]), np.array([0.0]), 0.25)[0] == 1.5
    assert flow.a(0) == 1 and flow.b(0) == 0 and flow.a(1) == 0 and flow.b(1) == 1


def test_interpolation_per_sample_times():
    x0 = np.ones((2, 3))
    eps = np.zeros((2, 3))
    z = flow.forward_interpolate(x0, eps, np.array([0.25, 0.75]))
    assert np.array_equal(z, [[0.75] * 3, [0.25] * 3])


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_interpolation_rejects_bad_t(t):
    with pytest.raises(ValueError):
        flow.forward_interpolate(np.zeros(2), np.zeros(2), t)


def test_interpolation_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        flow.forward_interpolate(np.zeros(2), np.zeros(3), 0.5)


def test_conditional_velocity_cases():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(5)
    assert not flow.conditional_velocity(x, x).any()
    assert np.array_equal(flow.conditional_velocity(np.zeros(5), x), x)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_velocity_is_time_derivative(t):
    rng = np.random.default_rng(2)
    x0, eps = rng.standard_normal(6), rng.standard_normal(6)
    h = 1e-6
    fd = (flow.forward_interpolate(x0, eps, t + h) - flow.forward_interpolate(x0, eps, t - h)) / (2 * h)
    assert np.allclose(fd, flow.conditional_velocity(x0, eps), atol=1e-8)


def test_cfm_loss_identities():
    rng = np.random.default_rng(3)
    x0, eps = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    target = eps - x0
    assert flow.cfm_loss(target, x0, eps) == 0.0
    for c in (0.5, -1.25, 3.0):
        assert abs(flow.cfm_loss(target + c, x0, eps) - c * c) <= 1e-12


def test_cfm_loss_hand_sum():
    x0 = np.array([[0.0, 1.0], [2.0, -1.0]])
    eps = np.array([[1.0, 1.0], [0.0, 0.5]])
    v = np.array([[0.5, 0.0], [-2.0, 2.0]])
    # targets: [[1, 0], [-2, 1.5]]; squared errors 0.25, 0, 0, 0.25
    assert flow.cfm_loss(v, x0, eps) == pytest.approx(0.125, abs=1e-15)


def test_cfm_loss_nonnegative_random():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b, c = (rng.standard_normal((3, 3)) for _ in range(3))
        assert flow.cfm_loss(a, b, c) >= 0.0


@pytest.mark.parametrize("steps", [1, 4, 20])
def test_euler_on_constant_field(steps):
    c = np.full((2, 3), 0.5)
    out = flow.euler_sample(lambda z, t: c, (2, 3), steps, seed=5, dtype=np.float64)
    z1 = np.random.default_rng(5).standard_normal((2, 3))
    assert np.allclose(out, np.clip(z1 - c, 0, 1), rtol=0, atol=1e-12)


def test_euler_zero_field_returns_clamped_noise():
    out = flow.euler_sample(lambda z, t: np.zeros_like(z), (4, 4), 7, seed=9)
    z1 = np.random.default_rng(9).standard_normal((4, 4)).astype(np.float32)
    assert out.tobytes() == np.clip(z1, 0, 1).tobytes()


def test_euler_time_grid_descends():
    seen = []
    flow.euler_sample(lambda z, t: seen.append(t) or np.zeros_like(z), (1,), 4, seed=0)
    assert seen == [1.0, 0.75, 0.5, 0.25]


def test_euler_divergence_reports_step():
    def v(z, t):
        return np.full_like(z, np.inf) if t < 0.6 else np.zeros_like(z)

    with pytest.raises(flow.DivergenceError) as err:
        flow.euler_sample(v, (2,), 5, seed=0)
    assert err.value.step == 3  # t = 1.0, 0.8, 0.6, 0.4
    with pytest.raises(ValueError):
        flow.euler_sample(v, (2,), 0, seed=0)


def _toy_set(n=4):
    rng = np.random.default_rng(0)
    imgs = np.zeros((n, 8, 8, 3), np.float32)
    for i in range(n):
        imgs[i, :, :, i % 3] = 1.0
        imgs[i, rng.integers(8), :, :] = 0.5
    seqs = [parse_prompt(w) for w in ("red", "green", "blue", "grey")[:n]]
    return imgs, seqs


def test_training_log_and_determinism(tmp_path):
    imgs, seqs = _toy_set()
    runs = []
    for k in range(2):
        m = Model(ModelConfig(**TINY), seed=0)
        log = flow.TrainLog(tmp_path / f"log{k}.csv")
        flow.train(m, imgs, seqs, 5, lr=1e-3, seed=3, batch=2, log=log)
        runs.append((m, log))
    rows = list(csv.reader(open(tmp_path / "log0.csv")))
    assert rows[0] == ["step", "loss", "lr", "seed"] and len(rows) == 6
    assert runs[0][1].losses == runs[1][1].losses
    a, b = runs[0][0].params, runs[1][0].params
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)


def test_training_aborts_on_nan():
    imgs, seqs = _toy_set()
    m = Model(ModelConfig(**TINY), seed=0)
    m.params["final.w"].data = np.full_like(m.params["final.w"].data, np.nan)
    with pytest.raises(flow.DivergenceError) as err:
        flow.train(m, imgs, seqs, 3, lr=1e-3, seed=0, batch=2)
    assert err.value.step == 0


def test_sampling_reproducible_and_independent_of_batching():
    m = Model(ModelConfig(**TINY), seed=1)
    m.params["final.w"].data = np.random.default_rng(0).standard_normal(m.params["final.w"].shape
                                                                         ).astype(np.float32) * 0.1
    _, seqs = _toy_set()
    a = flow.sample_images(m, seqs, steps=5, seed=4, batch=4)
    b = flow.sample_images(m, seqs, steps=5, seed=4, batch=4)
    c = flow.sample_images(m, seqs, steps=5, seed=4, batch=1)
    assert a.tobytes() == b.tobytes()
    assert np.allclose(a, c, atol=1e-5)
    assert a.min() >= 0.0 and a.max() <= 1.0


@pytest.mark.slow
def test_step_count_self_consistency():
    imgs, seqs = _toy_set()
    m = Model(ModelConfig(**TINY), seed=0)
    flow.train(m, imgs, seqs, 400, lr=3e-3, seed=0, batch=4)
    coarse = flow.sample_images(m, seqs, steps=20, seed=1)
    fine = flow.sample_images(m, seqs, steps=200, seed=1)
    assert np.abs(coarse - fine).mean() < 0.05
