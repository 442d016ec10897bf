"""
Threshold decision and benchmark metrics over detection scores.

Scores follow one convention throughout: higher means more in-distribution.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
from scipy.stats import rankdata

from core.utils.errors import ConfigError, DataError, NonFiniteError

logger = logging.getLogger(__name__)

DEFAULT_TPR = 0.95


class Decision(str, Enum):
    ID = 'ID'
    OOD = 'OOD'


@dataclass
class ScoreSet:
    scores: np.ndarray
    source_tag: str = ''

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size == 0:
            raise DataError(f"Score set {self.source_tag!r} is empty")
        if not np.isfinite(self.scores).all():
            raise NonFiniteError(f"Score set {self.source_tag!r} contains non-finite scores")

    def __len__(self):
        return self.scores.size


@dataclass
class DetectionReport:
    threshold: float
    auroc_pct: float
    fpr95_pct: float
    n_id: int
    n_ood: int
    tpr: float = DEFAULT_TPR
    decisions: Optional[List[str]] = field(default=None, repr=False)

    def to_dict(self):
        data = asdict(self)
        if data['decisions'] is None:
            data.pop('decisions')
        return data


def _as_scores(scores, tag=''):
    return scores.scores if isinstance(scores, ScoreSet) else ScoreSet(scores, tag).scores


def _check_tpr(tpr):
    if not 0 < tpr <= 1:
        raise ConfigError(f"tpr must lie in (0, 1], got {tpr}")


def decide(score, threshold):
    """ID iff score >= threshold"""
    if not (math.isfinite(score) and math.isfinite(threshold)):
        raise NonFiniteError("decide requires finite score and threshold")
    return Decision.ID if score >= threshold else Decision.OOD


def threshold_at_tpr(id_scores, tpr=DEFAULT_TPR):
    """Largest threshold keeping at least ceil(tpr * N) ID scores at or above it"""
    _check_tpr(tpr)
    scores = _as_scores(id_scores, 'id')
    keep = math.ceil(tpr * scores.size - 1e-9)
    keep = min(max(keep, 1), scores.size)
    return float(np.sort(scores)[::-1][keep - 1])


def auroc(id_scores, ood_scores):
    """Exact Mann-Whitney AUROC (ties count one half), in percent"""
    id_arr = _as_scores(id_scores, 'id')
    ood_arr = _as_scores(ood_scores, 'ood')
    n, m = id_arr.size, ood_arr.size
    ranks = rankdata(np.concatenate([id_arr, ood_arr]))
    # twice U keeps every intermediate an integer
    u2 = 2 * ranks[:n].sum() - n * (n + 1)
    return float(u2 / (2 * n * m) * 100)


def fpr_at_tpr(id_scores, ood_scores, tpr=DEFAULT_TPR):
    """Percentage of OOD scores accepted at threshold_at_tpr(id_scores, tpr)"""
    threshold = threshold_at_tpr(id_scores, tpr)
    ood_arr = _as_scores(ood_scores, 'ood')
    return float(np.count_nonzero(ood_arr >= threshold) / ood_arr.size * 100)


def evaluate(id_scores, ood_scores, tpr=DEFAULT_TPR, with_decisions=False):
    id_set = id_scores if isinstance(id_scores, ScoreSet) else ScoreSet(id_scores, 'id')
    ood_set = ood_scores if isinstance(ood_scores, ScoreSet) else ScoreSet(ood_scores, 'ood')
    threshold = threshold_at_tpr(id_set, tpr)
    report = DetectionReport(
        threshold=threshold,
        auroc_pct=auroc(id_set, ood_set),
        fpr95_pct=fpr_at_tpr(id_set, ood_set, tpr),
        n_id=len(id_set),
        n_ood=len(ood_set),
        tpr=tpr,
    )
    if with_decisions:
        report.decisions = [decide(s, threshold).value for s in np.concatenate([id_set.scores, ood_set.scores])]
    logger.info(f"AUROC {report.auroc_pct:.2f}%, FPR@{tpr:.0%} {report.fpr95_pct:.2f}% (n_id={report.n_id}, n_ood={report.n_ood})")
    return report
