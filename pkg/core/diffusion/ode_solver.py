"""
Runge-Kutta-Fehlberg 4(5) integrator with per-row adaptive step control.

Every row of the state matrix is an independent initial value problem with
its own time, step size and step counter, so a row's trajectory does not
depend on which other rows share the batch. Rows that have reached the end
time (or failed) drop out of the vector-field evaluations.

The 5th order solution is propagated; the embedded 4th order solution only
feeds the local error estimate.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import torch

from core.utils.errors import SolverError

logger = logging.getLogger(__name__)

C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)
# B5 - B4
E = (1 / 360, 0.0, -128 / 4275, -2197 / 75240, 1 / 50, 2 / 55)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
UNDERFLOW = 1e-12


@dataclass
class OdeSolution:
    t: torch.Tensor
    y: torch.Tensor
    nfe: torch.Tensor
    steps: torch.Tensor
    failures: Dict[int, SolverError] = field(default_factory=dict)

    @property
    def failed(self):
        mask = torch.zeros(self.y.shape[0], dtype=torch.bool)
        if self.failures:
            mask[list(self.failures)] = True
        return mask


def _rms(x):
    return torch.sqrt((x ** 2).mean(dim=1))


def _initial_step(f0, y0, span, atol, rtol):
    scale = atol + rtol * y0.abs()
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = torch.where((d0 < 1e-5) | (d1 < 1e-5), torch.full_like(d0, 1e-6), 0.01 * d0 / d1)
    h0 = torch.nan_to_num(h0, nan=1e-6, posinf=abs(span), neginf=1e-6)
    return torch.clamp(h0, max=abs(span))


def rkf45_solve(func, y0, t0, t1, atol=1e-5, rtol=1e-5, max_steps=100000, raise_on_failure=True):
    """
    Integrate dy/dt = func(t, y, rows) for every row of y0 from t0 to t1.

    ``func`` receives the per-row times ``t`` (shape ``(b,)``), the states
    of the active rows ``y`` (``(b, S)``) and their row indices ``rows``,
    and returns ``(b, S)``. t1 < t0 integrates backward in time.
    """
    if y0.dim() != 2:
        raise ValueError(f"State must be a (rows, size) matrix, got shape {tuple(y0.shape)}")
    n_rows = y0.shape[0]
    dtype = y0.dtype
    span = float(t1) - float(t0)
    direction = 1.0 if span >= 0 else -1.0

    t = torch.full((n_rows,), float(t0), dtype=dtype)
    y = y0.clone()
    nfe = torch.zeros(n_rows, dtype=torch.long)
    steps = torch.zeros(n_rows, dtype=torch.long)
    failures = {}
    if n_rows == 0 or span == 0:
        return OdeSolution(t=t, y=y, nfe=nfe, steps=steps, failures=failures)

    all_rows = torch.arange(n_rows)
    f0 = func(t, y, all_rows)
    nfe += 1
    h = direction * _initial_step(f0, y, span, atol, rtol)

    done = torch.zeros(n_rows, dtype=torch.bool)
    dead = torch.zeros(n_rows, dtype=torch.bool)
    t_end = float(t1)

    while True:
        active = ~(done | dead)
        if not active.any():
            break
        rows = active.nonzero().squeeze(1)
        ti, yi, hi = t[rows], y[rows], h[rows]

        remaining = t_end - ti
        hits_end = hi.abs() >= remaining.abs()
        hi = torch.where(hits_end, remaining, hi)

        ks = []
        for stage in range(6):
            ys = yi
            for a, k in zip(A[stage], ks):
                if a:
                    ys = ys + (hi * a).unsqueeze(1) * k
            ks.append(func(ti + C[stage] * hi, ys, rows))
        nfe[rows] += 6
        steps[rows] += 1

        y_new = yi
        err = torch.zeros_like(yi)
        for b, e, k in zip(B5, E, ks):
            if b:
                y_new = y_new + (hi * b).unsqueeze(1) * k
            if e:
                err = err + (hi * e).unsqueeze(1) * k

        scale = atol + rtol * torch.maximum(yi.abs(), y_new.abs())
        err_norm = _rms(err / scale)
        finite = torch.isfinite(y_new).all(dim=1) & torch.isfinite(err_norm)
        accept = finite & (err_norm <= 1.0)

        factor = torch.where(
            err_norm > 0,
            SAFETY * err_norm.clamp_min(1e-30) ** -0.2,
            torch.full_like(err_norm, MAX_FACTOR),
        ).clamp(MIN_FACTOR, MAX_FACTOR)
        factor = torch.where(finite, factor, torch.full_like(factor, MIN_FACTOR))
        factor = torch.where(accept, factor, factor.clamp(max=1.0))
        h_next = hi * factor

        accepted_rows = rows[accept]
        t_acc = torch.where(hits_end, torch.full_like(ti, t_end), ti + hi)
        t[accepted_rows] = t_acc[accept]
        y[accepted_rows] = y_new[accept]
        h[rows] = h_next
        done[accepted_rows[hits_end[accept]]] = True

        underflow = h_next.abs() < UNDERFLOW * torch.clamp(ti.abs(), min=1.0)
        exhausted = steps[rows] >= max_steps
        for position in (~done[rows] & (underflow | exhausted)).nonzero().squeeze(1).tolist():
            row = rows[position].item()
            if underflow[position]:
                reason = 'step_underflow' if finite[position] else 'non_finite_state'
            else:
                reason = 'max_steps'
            failures[row] = SolverError(reason, t[row].item())
            dead[row] = True
            logger.debug(f"Row {row} failed: {reason} at t={t[row].item():.6g}")

    if failures and raise_on_failure:
        raise failures[min(failures)]
    return OdeSolution(t=t, y=y, nfe=nfe, steps=steps, failures=failures)
