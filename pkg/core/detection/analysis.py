"""
Bits/dim versus detection quality across training budgets.

Each budget trains a fresh model, scores held-out ID and OOD sets by
log-likelihood and records mean ID bits/dim next to AUROC and FPR95.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from core.detection.evaluator import evaluate
from core.diffusion.likelihood import OdeConfig, log_likelihood_batch
from core.diffusion.trainer import fit
from core.utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Budget:
    epochs: int
    num_blocks: int
    lr: Optional[float] = None  # None keeps train.lr

    def __post_init__(self):
        if self.epochs < 1 or self.num_blocks < 1:
            raise ConfigError(f"Budget needs positive epochs and blocks, got {self.epochs}x{self.num_blocks}")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError(f"Budget learning rate must be positive, got {self.lr}")


# smallest to largest
DEFAULT_BUDGETS = (
    Budget(1, 1, 5e-4),
    Budget(2, 2, 1e-3),
    Budget(5, 4, 2e-3),
    Budget(10, 8, 2e-3),
    Budget(20, 12, 2e-3),
)


@dataclass
class BudgetRow:
    epochs: int
    num_blocks: int
    lr: float
    bpd: float
    auroc_pct: float
    fpr95_pct: float
    final_loss: float

    def to_dict(self):
        return asdict(self)


@dataclass
class BudgetTrend:
    bpd_nonincreasing: bool
    auroc_nondecreasing: bool

    def to_dict(self):
        return asdict(self)


def _finite_logp(records):
    return np.array([r.logp for r in records if r.ok], dtype=np.float64)


def budget_sweep(train, id_eval, ood_eval, spec, net_cfg, train_cfg, ode_cfg=None, budgets=DEFAULT_BUDGETS,
                 train_labels=None, id_labels=None, ood_labels=None, progress=False):
    ode_cfg = ode_cfg or OdeConfig()
    rows = []
    for budget in budgets:
        budget = budget if isinstance(budget, Budget) else Budget(*budget)
        lr = budget.lr if budget.lr is not None else train_cfg.lr
        result = fit(
            train, spec, replace(net_cfg, num_blocks=budget.num_blocks),
            replace(train_cfg, epochs=budget.epochs, iterations=None, lr=lr),
            labels=train_labels, progress=progress,
        )
        id_records = log_likelihood_batch(result.model, spec, result.normalizer, id_eval, ode_cfg, labels=id_labels)
        ood_records = log_likelihood_batch(result.model, spec, result.normalizer, ood_eval, ode_cfg, labels=ood_labels)
        report = evaluate(_finite_logp(id_records), _finite_logp(ood_records))
        bpd = float(np.mean([r.bpd for r in id_records if r.ok]))
        row = BudgetRow(
            epochs=budget.epochs, num_blocks=budget.num_blocks, lr=lr, bpd=bpd,
            auroc_pct=report.auroc_pct, fpr95_pct=report.fpr95_pct,
            final_loss=result.loss_trace[-1] if result.loss_trace else float('nan'),
        )
        logger.info(f"Budget epochs={budget.epochs} blocks={budget.num_blocks} lr={lr:g}: bpd={bpd:.4f} AUROC={row.auroc_pct:.2f}")
        rows.append(row)
    return rows


def budget_trend(rows):
    """Compare the smallest and the largest budget"""
    first, last = rows[0], rows[-1]
    return BudgetTrend(
        bpd_nonincreasing=last.bpd <= first.bpd,
        auroc_nondecreasing=last.auroc_pct >= first.auroc_pct,
    )
