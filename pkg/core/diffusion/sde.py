"""
Closed-form mathematics of the VE, VP and sub-VP diffusion SDEs.

All functions are pure and work on batches: ``z`` has shape ``(..., D)``
and ``t`` is a float or a tensor broadcastable against ``z[..., 0]``.

    VE     dz = sqrt(d[sigma(t)^2]/dt) dw          sigma(t) = s_min (s_max/s_min)^t
    VP     dz = -1/2 beta(t) z dt + sqrt(beta(t)) dw
    subVP  dz = -1/2 beta(t) z dt + sqrt(beta(t) (1 - exp(-2 B(t)))) dw

with beta(t) = b_min + t (b_max - b_min) and B(t) the integral of beta on [0, t].
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum

import torch

from core.utils.errors import ConfigError, DataError, NonFiniteError


class SdeKind(str, Enum):
    VE = 've'
    VP = 'vp'
    SUBVP = 'subvp'


@dataclass(frozen=True)
class SdeSpec:
    kind: SdeKind = SdeKind.SUBVP
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    beta_min: float = 0.2
    beta_max: float = 20.0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', SdeKind(str(getattr(self.kind, 'value', self.kind)).lower()))
        except ValueError:
            raise ConfigError(f"Unknown SDE kind: {self.kind!r}") from None
        for name in ('sigma_min', 'sigma_max', 'beta_min', 'beta_max'):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"sde.{name} must be a positive real, got {value}")
            object.__setattr__(self, name, value)
        if self.sigma_min >= self.sigma_max:
            raise ConfigError("sde.sigma_min must be smaller than sde.sigma_max")
        if self.beta_min >= self.beta_max:
            raise ConfigError("sde.beta_min must be smaller than sde.beta_max")

    def to_dict(self):
        data = asdict(self)
        data['kind'] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class Kernel:
    """Perturbation kernel p_0t(z(t) | z(0)) = N(mean_coeff * z(0), std^2 I)"""
    mean_coeff: torch.Tensor
    std: torch.Tensor


def _as_time(t, like=None, check=True):
    dtype = like.dtype if isinstance(like, torch.Tensor) and like.is_floating_point() else torch.float64
    device = like.device if isinstance(like, torch.Tensor) else None
    t = torch.as_tensor(t, dtype=dtype, device=device)
    if check:
        if not torch.isfinite(t).all():
            raise NonFiniteError("t contains non-finite values")
        if ((t < 0) | (t > 1)).any():
            raise DataError(f"t must lie in [0, 1], got {t.min().item():.6g}..{t.max().item():.6g}")
    return t


def _check_state(z):
    if not torch.isfinite(z).all():
        raise NonFiniteError("z contains non-finite values")


def beta(spec, t):
    return spec.beta_min + t * (spec.beta_max - spec.beta_min)


def integrated_beta(spec, t):
    return spec.beta_min * t + 0.5 * t ** 2 * (spec.beta_max - spec.beta_min)


def sigma(spec, t):
    return spec.sigma_min * (spec.sigma_max / spec.sigma_min) ** t


def drift_unchecked(spec, z, t):
    if spec.kind is SdeKind.VE:
        return torch.zeros_like(z)
    b = beta(spec, t)
    if isinstance(b, torch.Tensor) and b.dim() > 0:
        b = b.unsqueeze(-1)
    return -0.5 * b * z


def diffusion_unchecked(spec, t):
    if spec.kind is SdeKind.VE:
        return sigma(spec, t) * math.sqrt(2 * math.log(spec.sigma_max / spec.sigma_min))
    b = beta(spec, t)
    if spec.kind is SdeKind.VP:
        return torch.sqrt(b)
    return torch.sqrt(b * (-torch.expm1(-2 * integrated_beta(spec, t))))


def kernel_unchecked(spec, t):
    if spec.kind is SdeKind.VE:
        return Kernel(mean_coeff=torch.ones_like(t), std=sigma(spec, t))
    big_b = integrated_beta(spec, t)
    mean_coeff = torch.exp(-0.5 * big_b)
    if spec.kind is SdeKind.VP:
        std = torch.sqrt(-torch.expm1(-big_b))
    else:
        std = -torch.expm1(-big_b)
    return Kernel(mean_coeff=mean_coeff, std=std)


def drift(spec, z, t):
    """Drift f(z, t) of the forward SDE"""
    z = torch.as_tensor(z, dtype=torch.float64) if not isinstance(z, torch.Tensor) else z
    _check_state(z)
    return drift_unchecked(spec, z, _as_time(t, z))


def diffusion(spec, t):
    """Scalar diffusion coefficient g(t)"""
    return diffusion_unchecked(spec, _as_time(t))


def kernel(spec, t):
    """Closed-form perturbation kernel at time t"""
    return kernel_unchecked(spec, _as_time(t))


def prior_std(spec):
    return spec.sigma_max if spec.kind is SdeKind.VE else 1.0


def prior_logpdf(spec, z):
    """Log-density (nats) of the terminal prior, summed over the last axis"""
    z = torch.as_tensor(z, dtype=torch.float64) if not isinstance(z, torch.Tensor) else z
    _check_state(z)
    dim = z.shape[-1]
    s = prior_std(spec)
    return -0.5 * dim * math.log(2 * math.pi * s ** 2) - (z ** 2).sum(-1) / (2 * s ** 2)


def prior_sample(spec, n, dim, generator=None, dtype=torch.float32):
    return prior_std(spec) * torch.randn(n, dim, generator=generator, dtype=dtype)
