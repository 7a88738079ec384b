import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gda.schedule import build_schedule, derive_seed, forward_diffuse, make_stream, sample_standard_normal

# Frozen from a pure-Python product over the linear betas (no numpy).
ALPHA_BAR_10 = 0.98088412930003
ALPHA_BAR_25 = 0.8827129294402376
ALPHA_BAR_50 = 0.602951597329715


def test_alpha_bar_matches_pure_python_product(sched):
    assert sched.alpha_bar(10) == pytest.approx(ALPHA_BAR_10, rel=1e-12)
    assert sched.alpha_bar(25) == pytest.approx(ALPHA_BAR_25, rel=1e-12)
    assert sched.alpha_bar(50) == pytest.approx(ALPHA_BAR_50, rel=1e-12)


def test_endpoints_and_indexing(sched):
    assert sched.alpha_bar(0) == 1.0
    assert sched.beta(1) == pytest.approx(1e-4)
    assert sched.beta(50) == pytest.approx(0.02)
    assert sched.alpha(3) == pytest.approx(1 - sched.beta(3))
    with pytest.raises(ValueError):
        sched.alpha_bar(51)
    with pytest.raises(ValueError):
        sched.beta(0)


def test_alpha_bar_strictly_decreasing(sched):
    ab = [sched.alpha_bar(t) for t in range(51)]
    assert all(a > b for a, b in zip(ab, ab[1:]))
    assert all(0 < a <= 1 for a in ab)


def test_arrays_are_read_only(sched):
    with pytest.raises(ValueError):
        sched.betas[0] = 0.5


def test_sigma_modes():
    assert np.all(build_schedule(deterministic=True).sigmas == 0)
    s = build_schedule(deterministic=False)
    assert s.sigma(7) == pytest.approx(math.sqrt(s.beta(7)))


@pytest.mark.parametrize("kw", [dict(total_steps=0), dict(total_steps=2.5), dict(beta_min=0.0),
                                dict(beta_min=0.03, beta_max=0.02), dict(beta_max=1.0)])
def test_invalid_schedules(kw):
    with pytest.raises(ValueError):
        build_schedule(**kw)


def test_forward_diffuse_formula(sched):
    x0 = torch.linspace(-1, 1, 16).reshape(1, 4, 4)
    eps = torch.ones_like(x0)
    xt = forward_diffuse(x0, 50, eps, sched)
    expected = math.sqrt(ALPHA_BAR_50) * x0 + math.sqrt(1 - ALPHA_BAR_50)
    assert torch.allclose(xt, expected, atol=1e-6)


def test_forward_diffuse_rejects_bad_input(sched):
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(1, 4, 4), 3, torch.zeros(1, 4, 5), sched)
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(1, 4, 4), 0, torch.zeros(1, 4, 4), sched)


def test_streams_are_keyed_and_reproducible():
    a = torch.randn(5, generator=make_stream(3, "x", 1))
    b = torch.randn(5, generator=make_stream(3, "x", 1))
    c = torch.randn(5, generator=make_stream(3, "x", 2))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert derive_seed(0, "ab") != derive_seed(0, "a", "b")


def test_sample_standard_normal_validates():
    with pytest.raises(ValueError):
        sample_standard_normal((0, 3), make_stream(0))
    assert sample_standard_normal((2, 3), make_stream(0)).shape == (2, 3)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 50), seed=st.integers(0, 2**31))
def test_forward_diffuse_is_affine_in_x0(t, seed):
    sched = build_schedule()
    gen = torch.Generator().manual_seed(seed)
    x0, x1, eps = (torch.randn(1, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3))
    lhs = forward_diffuse(x0 + x1, t, eps, sched) - forward_diffuse(x0, t, eps, sched)
    assert torch.allclose(lhs, math.sqrt(sched.alpha_bar(t)) * x1, atol=1e-12)
