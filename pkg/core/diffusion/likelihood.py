"""
Exact log-likelihood of representations through the probability flow ODE.

The augmented state (z, accumulated divergence) is integrated from data
(t_min) to prior (t_max):

    dz/dt      = f(z, t) - 1/2 g(t)^2 s(z, t[, c])
    d(div)/dt  = div_z of the field above, by the Skilling-Hutchinson estimator

and log p_0(z) = log p_1(z(t_max)) + div(t_max) + normalizer Jacobian.

Probe vectors are drawn once per sample and held fixed across all solver
steps; the per-row seed is derive_seed(probe_seed, row_index).
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import torch
from torch import nn
from tqdm import tqdm

from config import Config
from core.diffusion.ode_solver import rkf45_solve
from core.diffusion.sde import (
    _as_time,
    diffusion_unchecked,
    drift_unchecked,
    kernel_unchecked,
    prior_logpdf,
)
from core.utils.errors import ConfigError, DataError
from core.utils.helpers import as_row_tensor, derive_seed

logger = logging.getLogger(__name__)


class ProbeKind(str, Enum):
    RADEMACHER = 'rademacher'
    GAUSSIAN = 'gaussian'


@dataclass(frozen=True)
class OdeConfig:
    atol: float = 1e-5
    rtol: float = 1e-5
    t_min: float = 1e-5
    t_max: float = 1.0
    probe_count: int = 1
    probe_kind: ProbeKind = ProbeKind.RADEMACHER
    probe_seed: int = 0
    max_steps: int = Config.MAX_SOLVER_STEPS
    chunk_size: int = Config.LIKELIHOOD_CHUNK

    def __post_init__(self):
        try:
            object.__setattr__(self, 'probe_kind', ProbeKind(str(getattr(self.probe_kind, 'value', self.probe_kind)).lower()))
        except ValueError:
            raise ConfigError(f"Unknown probe kind: {self.probe_kind!r}") from None
        if self.atol <= 0 or self.rtol <= 0:
            raise ConfigError("ode.atol and ode.rtol must be positive")
        if not 0 < self.t_min < self.t_max <= 1:
            raise ConfigError("ode requires 0 < t_min < t_max <= 1")
        if self.probe_count < 1:
            raise ConfigError("ode.probe_count must be at least 1")
        if self.max_steps < 1 or self.chunk_size < 1:
            raise ConfigError("ode.max_steps and ode.chunk_size must be positive")

    def to_dict(self):
        data = asdict(self)
        data['probe_kind'] = self.probe_kind.value
        return data


@dataclass
class LikelihoodRecord:
    logp: float
    bpd: float
    nfe: int
    prior_term: float
    divergence_term: float
    jacobian_term: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None


def bits_per_dim(logp, dim):
    return -logp / (dim * math.log(2))


def gaussian_score_oracle(sde):
    """Exact score of the perturbed marginals when the data are N(0, I)"""
    def score(z, t, c=None):
        k = kernel_unchecked(sde, torch.as_tensor(t, dtype=z.dtype))
        var = k.mean_coeff ** 2 + k.std ** 2
        if var.dim() > 0:
            var = var.unsqueeze(-1)
        return -z / var
    return score


def _call_score(score_fn, z, t, c):
    return score_fn(z, t, c) if c is not None else score_fn(z, t)


def flow_field_unchecked(score_fn, sde, z, t, c=None):
    g2 = diffusion_unchecked(sde, t) ** 2
    if isinstance(g2, torch.Tensor) and g2.dim() > 0:
        g2 = g2.unsqueeze(-1)
    return drift_unchecked(sde, z, t) - 0.5 * g2 * _call_score(score_fn, z, t, c)


def flow_field(score_fn, sde, z, t, c=None):
    """Probability flow vector field f(z, t) - 1/2 g(t)^2 s(z, t[, c])"""
    return flow_field_unchecked(score_fn, sde, z, _as_time(t, z), c)


def draw_probes(kind, count, dim, seed, dtype=torch.float64):
    generator = torch.Generator().manual_seed(int(seed))
    if ProbeKind(kind) is ProbeKind.RADEMACHER:
        return torch.randint(0, 2, (count, dim), generator=generator).to(dtype) * 2 - 1
    return torch.randn(count, dim, generator=generator, dtype=dtype)


def field_and_divergence(field, z, t, probes):
    """Field value and mean of eps^T J eps over probes, via exact forward-mode JVPs"""
    value, total = None, 0.0
    for eps in probes:
        value, jvp_out = torch.func.jvp(lambda x: field(x, t), (z,), (eps,))
        total = total + (eps * jvp_out).sum(-1)
    return value, total / len(probes)


def divergence_estimate(field, z, t, probes):
    """Skilling-Hutchinson estimate of the divergence of field(., t) at z"""
    return field_and_divergence(field, z, t, probes)[1]


@contextmanager
def _frozen(model):
    if not isinstance(model, nn.Module):
        yield
        return
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)


def _model_dtype(model):
    if isinstance(model, nn.Module):
        first = next(model.parameters(), None)
        if first is not None:
            return first.dtype
    return torch.float64


def _as_matrix(reps, dtype):
    data = as_row_tensor(reps)
    if data.dim() == 1:
        data = data.unsqueeze(0)
    return data.to(dtype)


def _check_conditioning(model, labels, n_rows):
    config = getattr(model, 'config', None)
    conditional = bool(config is not None and config.conditional)
    if not conditional:
        return None
    if labels is None:
        raise DataError("Conditional model requires a class condition for every row")
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() == 1 and n_rows > 1:
        labels = labels.expand(n_rows)
    if labels.numel() != n_rows:
        raise DataError(f"{labels.numel()} labels for {n_rows} rows")
    return labels


def integrate_flow(score_fn, sde, z, t_start, t_end, cfg, c=None, raise_on_failure=True):
    """Transport z along the probability flow ODE between two times (no divergence)"""
    with _frozen(score_fn):
        def func(t, y, rows):
            return flow_field_unchecked(score_fn, sde, y, t, None if c is None else c[rows])
        with torch.no_grad():
            return rkf45_solve(
                func, z, t_start, t_end, atol=cfg.atol, rtol=cfg.rtol,
                max_steps=cfg.max_steps, raise_on_failure=raise_on_failure,
            )


def log_likelihood_batch(model, sde, normalizer, reps, cfg, labels=None, progress=False, row_offset=0):
    """Per-row log-likelihood records; solver failures are reported per row"""
    dtype = _model_dtype(model)
    data = _as_matrix(reps, dtype)
    n_rows, dim = data.shape
    config = getattr(model, 'config', None)
    if config is not None and config.input_dim != dim:
        raise DataError(f"Model expects dimension {config.input_dim}, representations have {dim}")
    if labels is None and getattr(reps, 'labels', None) is not None and config is not None and config.conditional:
        labels = reps.labels
    labels = _check_conditioning(model, labels, n_rows)

    if normalizer is not None:
        data = normalizer.normalize(data)
        jacobian = normalizer.log_det_jacobian()
    else:
        jacobian = 0.0

    records = []
    chunks = range(0, n_rows, cfg.chunk_size)
    for start in tqdm(chunks, desc='log-likelihood', unit='chunk', disable=not progress):
        stop = min(start + cfg.chunk_size, n_rows)
        z = data[start:stop]
        c_chunk = labels[start:stop] if labels is not None else None
        probes = torch.stack([
            draw_probes(cfg.probe_kind, cfg.probe_count, dim, derive_seed(cfg.probe_seed, row_offset + row), dtype)
            for row in range(start, stop)
        ], dim=1)

        def func(t, y, rows):
            c = None if c_chunk is None else c_chunk[rows]
            field = lambda x, tt: flow_field_unchecked(model, sde, x, tt, c)
            value, div = field_and_divergence(field, y[:, :dim], t, probes[:, rows])
            return torch.cat([value, div.unsqueeze(1)], dim=1)

        y0 = torch.cat([z, torch.zeros(z.shape[0], 1, dtype=dtype)], dim=1)
        with _frozen(model):
            solution = rkf45_solve(
                func, y0, cfg.t_min, cfg.t_max, atol=cfg.atol, rtol=cfg.rtol,
                max_steps=cfg.max_steps, raise_on_failure=False,
            )

        for local in range(stop - start):
            row = start + local
            nfe = int(solution.nfe[local])
            failure = solution.failures.get(local)
            if failure is not None:
                logger.warning(f"Likelihood of row {row_offset + row} failed: {failure}")
                records.append(LikelihoodRecord(
                    logp=math.nan, bpd=math.nan, nfe=nfe, prior_term=math.nan,
                    divergence_term=math.nan, jacobian_term=jacobian, error=str(failure),
                ))
                continue
            z1 = solution.y[local, :dim].detach().to(torch.float64)
            prior = float(prior_logpdf(sde, z1))
            divergence = float(solution.y[local, dim])
            logp = prior + divergence + jacobian
            records.append(LikelihoodRecord(
                logp=logp, bpd=bits_per_dim(logp, dim), nfe=nfe,
                prior_term=prior, divergence_term=divergence, jacobian_term=jacobian,
            ))
        logger.debug(f"Likelihood rows {start}-{stop} done, mean nfe {solution.nfe.float().mean():.1f}")
    return records


def log_likelihood(model, sde, normalizer, z, cfg, c=None, row_index=0):
    """Log-likelihood of a single representation; raises on solver failure"""
    z = torch.as_tensor(z)
    if z.dim() != 1:
        raise DataError("log_likelihood expects a single vector; use log_likelihood_batch")
    labels = None if c is None else torch.as_tensor([int(c)])
    dtype = _model_dtype(model)
    data = z.to(dtype).unsqueeze(0)
    labels = _check_conditioning(model, labels, 1)
    if normalizer is not None:
        data = normalizer.normalize(data)
    jacobian = normalizer.log_det_jacobian() if normalizer is not None else 0.0
    dim = data.shape[1]
    probes = draw_probes(cfg.probe_kind, cfg.probe_count, dim, derive_seed(cfg.probe_seed, row_index), dtype).unsqueeze(1)

    def func(t, y, rows):
        field = lambda x, tt: flow_field_unchecked(model, sde, x, tt, labels)
        value, div = field_and_divergence(field, y[:, :dim], t, probes[:, rows])
        return torch.cat([value, div.unsqueeze(1)], dim=1)

    y0 = torch.cat([data, torch.zeros(1, 1, dtype=dtype)], dim=1)
    with _frozen(model):
        solution = rkf45_solve(
            func, y0, cfg.t_min, cfg.t_max, atol=cfg.atol, rtol=cfg.rtol,
            max_steps=cfg.max_steps, raise_on_failure=True,
        )
    prior = float(prior_logpdf(sde, solution.y[0, :dim].detach().to(torch.float64)))
    divergence = float(solution.y[0, dim])
    logp = prior + divergence + jacobian
    return LikelihoodRecord(
        logp=logp, bpd=bits_per_dim(logp, dim), nfe=int(solution.nfe[0]),
        prior_term=prior, divergence_term=divergence, jacobian_term=jacobian,
    )
