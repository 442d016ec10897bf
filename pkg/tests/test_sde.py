import math

import numpy as np
import pytest
import torch
from scipy.stats import norm

from core.diffusion.sde import (
    SdeKind,
    SdeSpec,
    diffusion,
    drift,
    integrated_beta,
    kernel,
    prior_logpdf,
    prior_sample,
    prior_std,
)
from core.utils.errors import ConfigError, DataError, NonFiniteError


def test_defaults():
    spec = SdeSpec()
    assert spec.kind is SdeKind.SUBVP
    assert (spec.sigma_min, spec.sigma_max) == (0.01, 50.0)
    assert (spec.beta_min, spec.beta_max) == (0.2, 20.0)


@pytest.mark.parametrize('kwargs', [
    {'kind': 'nope'},
    {'sigma_min': 0.0},
    {'sigma_min': 60.0},
    {'beta_min': 30.0},
    {'beta_max': float('nan')},
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        SdeSpec(**kwargs)


def test_spec_round_trip():
    spec = SdeSpec(kind='ve', sigma_max=20.0)
    assert SdeSpec.from_dict(spec.to_dict()) == spec


def test_ve_kernel_closed_form(ve):
    k = kernel(ve, 0.5)
    assert float(k.mean_coeff) == 1.0
    assert float(k.std) == pytest.approx(0.01 * (50 / 0.01) ** 0.5, rel=1e-12)


def test_vp_kernel_closed_form(vp):
    t = 0.3
    big_b = 0.2 * t + 0.5 * t ** 2 * (20 - 0.2)
    k = kernel(vp, t)
    assert float(k.mean_coeff) == pytest.approx(math.exp(-0.5 * big_b), rel=1e-12)
    assert float(k.std) == pytest.approx(math.sqrt(1 - math.exp(-big_b)), rel=1e-12)


def test_subvp_kernel_closed_form(subvp):
    t = 0.7
    big_b = float(integrated_beta(subvp, t))
    k = kernel(subvp, t)
    assert float(k.std) == pytest.approx(1 - math.exp(-big_b), rel=1e-12)


@pytest.mark.parametrize('kind', ['vp', 'subvp'])
def test_kernel_starts_at_identity(kind):
    k = kernel(SdeSpec(kind=kind), 0.0)
    assert float(k.mean_coeff) == 1.0
    assert float(k.std) == 0.0


def test_vp_preserves_unit_variance(vp):
    for t in (0.01, 0.2, 0.9, 1.0):
        k = kernel(vp, t)
        assert float(k.mean_coeff ** 2 + k.std ** 2) == pytest.approx(1.0, abs=1e-12)


def test_subvp_std_below_vp(vp, subvp):
    t = torch.linspace(0.01, 1.0, 50, dtype=torch.float64)
    assert (kernel(subvp, t).std <= kernel(vp, t).std).all()


def test_drift_and_diffusion(ve, vp):
    z = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    assert torch.equal(drift(ve, z, 0.4), torch.zeros_like(z))
    beta = 0.2 + 0.4 * (20 - 0.2)
    assert torch.allclose(drift(vp, z, 0.4), -0.5 * beta * z)
    assert float(diffusion(vp, 0.4)) == pytest.approx(math.sqrt(beta))
    sigma = 0.01 * 5000 ** 0.4
    assert float(diffusion(ve, 0.4)) == pytest.approx(sigma * math.sqrt(2 * math.log(5000)))


def test_batched_time(vp):
    z = torch.ones(3, 2, dtype=torch.float64)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    out = drift(vp, z, t)
    assert out.shape == (3, 2)
    assert torch.allclose(out[1], drift(vp, z[1], 0.5))


def test_time_out_of_range(vp):
    with pytest.raises(DataError):
        kernel(vp, 1.5)


def test_non_finite_inputs(vp):
    with pytest.raises(NonFiniteError):
        kernel(vp, float('nan'))
    with pytest.raises(NonFiniteError):
        drift(vp, torch.tensor([float('inf')]), 0.5)


@pytest.mark.parametrize('kind', ['ve', 'vp', 'subvp'])
def test_prior_logpdf_matches_scipy(kind):
    spec = SdeSpec(kind=kind)
    z = torch.randn(10, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    expected = norm.logpdf(z.numpy(), scale=prior_std(spec)).sum(-1)
    np.testing.assert_allclose(prior_logpdf(spec, z).numpy(), expected, rtol=1e-12)


def test_prior_sample_scale(ve):
    samples = prior_sample(ve, 20000, 2, torch.Generator().manual_seed(1), torch.float64)
    assert samples.shape == (20000, 2)
    assert float(samples.std()) == pytest.approx(50.0, rel=0.03)
