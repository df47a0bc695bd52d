import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TOL, relative_error, smooth_tiny_model
from sourcefree import InvalidInputError
from sourcefree.deployment import (
    AdaptationConfig,
    DeploymentModel,
    FrozenParameterViolation,
    SsmWeight,
    adaptation_loss,
    compute_ssm,
    loss_d1,
    loss_d2,
    mean_confidence,
    run_adaptation,
    split_softmax,
)
from sourcefree.models import module_checksum


def _w(w, wp):
    return SsmWeight(torch.tensor(w, dtype=torch.float64), torch.tensor(wp, dtype=torch.float64))


def test_ssm_all_mass_on_negative():
    s = compute_ssm(torch.tensor([0.0, 0.0, 1.0, 0.0]), 2)
    assert s.w.item() == 1.0
    assert s.w_prime.item() == pytest.approx(math.e, abs=1e-6)


def test_ssm_uniform():
    s = compute_ssm(torch.full((10,), 0.1, dtype=torch.float64), 6)
    assert s.w.item() == pytest.approx(1.10517, abs=1e-5)
    assert s.w_prime.item() == pytest.approx(2.45960, abs=1e-5)


def test_ssm_weak_complement():
    s = compute_ssm(torch.tensor([0.6, 0.3, 0.05, 0.05], dtype=torch.float64), 2)
    assert s.w.item() == pytest.approx(1.82212, abs=1e-5)
    assert s.w_prime.item() == pytest.approx(2.01375, abs=1e-5)


def test_ssm_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        compute_ssm(torch.tensor([1.2, -0.2]), 1)


@settings(max_examples=100)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=12), st.integers(1, 11))
def test_ssm_bounds(logits, num_positive):
    num_positive = min(num_positive, len(logits) - 1)
    p = torch.softmax(torch.tensor(logits, dtype=torch.float64), -1)
    s = compute_ssm(p, num_positive)
    assert 1.0 <= s.w.item() <= math.e
    assert 1.0 <= s.w_prime.item() <= math.e


def test_ssm_extremes_exact():
    s = compute_ssm(torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), 2)
    assert s.w.item() == math.e and s.w_prime.item() == math.e
    s = compute_ssm(torch.tensor([0.5, 0.4, 0.1], dtype=torch.float64), 2)
    assert s.w.item() < math.e and s.w_prime.item() < math.e


def test_d1_symmetric():
    z = torch.tensor([[0.25, 0.25, 0.5]], dtype=torch.float64)
    assert loss_d1(z, _w([1.0], [1.0]), 2).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_d1_reference():
    z = torch.tensor([[0.3, 0.3, 0.4]], dtype=torch.float64)
    got = loss_d1(z, _w([1.5], [1.0]), 2).item()
    assert got == pytest.approx(1.5 * -math.log(0.6) - math.log(0.4), abs=1e-12)
    # 1.68251 is a loosely rounded reference; the exact value is 1.682529
    assert got == pytest.approx(1.68251, abs=5e-5)


def test_d1_large_w_pushes_positive_mass():
    # 1-D scan over positive group mass m
    m = torch.linspace(0.001, 0.999, 999, dtype=torch.float64)
    z = torch.stack([m, 1 - m], -1)
    for w in (5.0, 50.0):
        vals = loss_d1(z, _w([w] * len(m), [1.0] * len(m)), 1, reduction="none")
        best = m[vals.argmin()].item()
        assert best == pytest.approx(w / (w + 1), abs=1e-3)
    assert m[loss_d1(z, _w([50.0] * 999, [1.0] * 999), 1, "none").argmin()].item() > 0.97


def test_d1_zero_mass_clamped():
    z = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    v = loss_d1(z, _w([1.0], [1.0]), 1).item()
    assert v == pytest.approx(-math.log(1e-12))


def test_split_softmax_cases():
    h = torch.tensor([1.0, 2.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    zs, zn = split_softmax(h, 2)
    np.testing.assert_allclose(zs.numpy(), [0.26894, 0.73106], atol=1e-5)
    np.testing.assert_allclose(zn.numpy(), [1 / 3] * 3)
    zs2, zn2 = split_softmax(h + 7.5, 2)
    assert torch.allclose(zs, zs2) and torch.allclose(zn, zn2)
    zs, zn = split_softmax(torch.zeros(7), 3)
    assert torch.allclose(zs, torch.full((3,), 1 / 3)) and torch.allclose(zn, torch.full((4,), 0.25))


@settings(max_examples=50)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=10), st.integers(1, 9))
def test_split_softmax_normalised(logits, k):
    k = min(k, len(logits) - 1)
    zs, zn = split_softmax(torch.tensor(logits, dtype=torch.float64), k)
    assert abs(zs.sum().item() - 1) < 1e-6 and abs(zn.sum().item() - 1) < 1e-6


def test_d2_cases():
    zs = torch.full((1, 4), 0.25, dtype=torch.float64)
    zn = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert loss_d2(zs, zn, _w([1.0], [1.0])).item() == pytest.approx(math.log(4), abs=1e-12)
    one = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    assert loss_d2(one, zn, _w([2.0], [2.0])).item() == 0.0
    zs = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
    assert loss_d2(zs, zn, _w([2.0], [1.0])).item() == pytest.approx(0.65017, abs=1e-5)


def test_d2_zero_probability_gradient_finite():
    h = torch.tensor([[60.0, -60.0, 0.0, -80.0]], dtype=torch.float64, requires_grad=True)
    zs, zn = split_softmax(h, 2)
    loss_d2(zs, zn, _w([1.0], [1.0])).backward()
    assert torch.isfinite(h.grad).all()


def _logit_instance(seed):
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(4, 7, generator=g, dtype=torch.float64) * 2
    p = torch.softmax(torch.randn(4, 7, generator=g, dtype=torch.float64), -1)
    return h.requires_grad_(True), compute_ssm(p, 3)


@pytest.mark.parametrize("which", ["d1", "d2"])
def test_gradients_wrt_logits(which):
    worst = 0.0
    for seed in range(20):
        h, ssm = _logit_instance(seed)

        def fn():
            if which == "d1":
                return loss_d1(torch.softmax(h, -1), ssm, 3)
            return loss_d2(*split_softmax(h, 3), ssm)

        worst = max(worst, relative_error(fn, [h]))
    assert worst < TOL


@pytest.mark.parametrize("which", ["d1", "d2", "d"])
def test_gradients_wrt_ft(which):
    worst = 0.0
    for seed in range(20):
        dm = DeploymentModel(smooth_tiny_model(seed), beta=0.1)
        x = torch.randn(4, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        ssm = compute_ssm(dm.source_probs(x), dm.num_positive)
        worst = max(worst, relative_error(lambda: adaptation_loss(dm, x, ssm)[which], list(dm.Ft.parameters())))
    assert worst < TOL


def test_ft_starts_as_copy_and_source_frozen():
    src = smooth_tiny_model(0)
    dm = DeploymentModel(src)
    assert module_checksum(dm.Ft) == module_checksum(src.Fs)
    assert dm.Ft is not src.Fs
    assert not any(p.requires_grad for p in src.parameters())
    x = torch.randn(6, 5, dtype=torch.float64)
    adaptation_loss(dm, x)["d"].backward()
    assert all(p.grad is None for p in src.parameters())


def _tiny_target(n=24, seed=0):
    return torch.randn(n, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_zero_iterations_keeps_ft():
    dm = DeploymentModel(smooth_tiny_model(1))
    ref = module_checksum(dm.source.Fs)
    trace = run_adaptation(dm, _tiny_target(), AdaptationConfig(iterations=0))
    assert trace == [] and module_checksum(dm.Ft) == ref


def test_adaptation_trains_only_ft(caplog):
    dm = DeploymentModel(smooth_tiny_model(2))
    frozen = dm.frozen_checksum()
    ft = module_checksum(dm.Ft)
    with caplog.at_level("INFO"):
        trace = run_adaptation(dm, _tiny_target(), AdaptationConfig(iterations=15, batch_size=8, learning_rate=1e-2))
    assert dm.frozen_checksum() == frozen
    assert module_checksum(dm.Ft) != ft
    assert len(trace) == 15 and set(trace[0]) == {"step", "wall", "d1", "d2", "d"}
    assert "frozen: OK" in caplog.text


def test_beta_weights_entropy_term():
    a = DeploymentModel(smooth_tiny_model(3), beta=0.1)
    x = _tiny_target(8)
    l1 = adaptation_loss(a, x)
    a.beta = 0.5
    l2 = adaptation_loss(a, x)
    assert l1["d2"].item() == pytest.approx(l2["d2"].item())
    assert l2["d"].item() - l1["d"].item() == pytest.approx(0.4 * l1["d2"].item())


def test_cached_ssm_matches_fresh():
    torch.manual_seed(0)
    base = smooth_tiny_model(4)
    x = _tiny_target(16)
    runs = []
    for cache in (False, True):
        dm = DeploymentModel(base)
        run_adaptation(dm, x, AdaptationConfig(iterations=5, batch_size=4, cache_ssm=cache, learning_rate=1e-2))
        runs.append(module_checksum(dm.Ft))
    assert runs[0] == runs[1]


def test_frozen_violation_detected():
    dm = DeploymentModel(smooth_tiny_model(5))

    def tamper(step, row):
        with torch.no_grad():
            dm.source.D.bias.add_(1.0)

    with pytest.raises(FrozenParameterViolation):
        run_adaptation(dm, _tiny_target(), AdaptationConfig(iterations=2), tamper)


def test_mean_confidence_range():
    dm = DeploymentModel(smooth_tiny_model(6))
    c = mean_confidence(dm, _tiny_target())
    assert 1 / dm.num_outputs <= c <= 1
