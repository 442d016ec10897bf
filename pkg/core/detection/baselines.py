"""
Label-free feature-space OOD scores: k-th nearest neighbor distance and the
principal-subspace Residual (offset zero by default).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.covariance import EmpiricalCovariance
from tqdm import tqdm

from core.detection.evaluator import auroc, fpr_at_tpr
from core.utils.errors import ConfigError, DataError
from core.utils.helpers import row_data

logger = logging.getLogger(__name__)

DEFAULT_K = 50
DEGENERATE_RTOL = 1e-10
QUERY_CHUNK = 1024


def _matrix(x, what):
    x = torch.as_tensor(np.asarray(row_data(x)), dtype=torch.float64)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.dim() != 2:
        raise DataError(f"{what} must be a matrix, got shape {tuple(x.shape)}")
    return x


class KnnIndex:
    """Exact exhaustive k-NN index over ID reference representations"""

    def __init__(self, reference, k=DEFAULT_K, normalize=True):
        reference = _matrix(reference, "reference")
        if k < 1:
            raise ConfigError(f"k must be positive, got {k}")
        if k > reference.shape[0]:
            raise ConfigError(f"k={k} exceeds the {reference.shape[0]} reference points")
        self.k = int(k)
        self.normalize = normalize
        self.reference = F.normalize(reference, dim=-1) if normalize else reference

    @property
    def dim(self):
        return self.reference.shape[1]

    def score(self, query):
        return knn_score(self, query)


def knn_score(index, query):
    """Negative distance to the k-th nearest reference point; a matrix query returns a vector"""
    single = np.ndim(row_data(query)) == 1
    query = _matrix(query, "query")
    if query.shape[1] != index.dim:
        raise DataError(f"Query dimension {query.shape[1]} does not match index dimension {index.dim}")
    if index.normalize:
        query = F.normalize(query, dim=-1)

    scores = []
    for start in range(0, query.shape[0], QUERY_CHUNK):
        dist = torch.cdist(
            query[start:start + QUERY_CHUNK], index.reference,
            compute_mode='donot_use_mm_for_euclid_dist',
        )
        scores.append(-dist.kthvalue(index.k, dim=1).values)
    scores = torch.cat(scores).numpy()
    return float(scores[0]) if single else scores


@dataclass
class ResidualProjector:
    mean: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    num_principal: int
    offset: Optional[np.ndarray] = None

    def __post_init__(self):
        dim = self.eigvecs.shape[0]
        if not 0 <= self.num_principal <= dim:
            raise ConfigError(f"num_principal must lie in [0, {dim}], got {self.num_principal}")
        if self.offset is None:
            self.offset = np.zeros(dim)

    @property
    def dim(self):
        return self.eigvecs.shape[0]

    @property
    def principal_basis(self):
        return self.eigvecs[:, :self.num_principal]

    @property
    def residual_basis(self):
        return self.eigvecs[:, self.num_principal:]

    def with_num_principal(self, num_principal):
        return ResidualProjector(self.mean, self.eigvecs, self.eigvals, num_principal, self.offset)

    def score(self, query):
        return residual_score(self, query)


def default_num_principal(dim):
    """Principal units kept so that a third of the dimensions form the residual"""
    return dim - math.ceil(dim / 3)


def _ordered_eigh(covariance):
    eigvals, eigvecs = np.linalg.eigh(covariance)
    lead_axis = np.argmax(np.abs(eigvecs), axis=0)
    signs = np.sign(eigvecs[lead_axis, np.arange(eigvecs.shape[1])])
    eigvecs = eigvecs * np.where(signs == 0, 1.0, signs)

    top = eigvals.max(initial=0.0)
    degenerate = eigvals <= DEGENERATE_RTOL * top if top > 0 else np.ones_like(eigvals, dtype=bool)
    regular = np.flatnonzero(~degenerate)
    regular = regular[np.argsort(-eigvals[regular], kind='stable')]
    tail = np.flatnonzero(degenerate)
    tail = tail[np.argsort(lead_axis[tail], kind='stable')]
    order = np.concatenate([regular, tail])
    return eigvals[order], eigvecs[:, order]


def fit_residual(train, num_principal=None, offset=None):
    """Eigendecomposition of the centered training covariance, descending eigenvalue order"""
    train = _matrix(train, "training set").numpy()
    n_rows, dim = train.shape
    if n_rows < 2:
        raise DataError("Residual fit needs at least two training rows")
    if num_principal is None:
        num_principal = default_num_principal(dim)

    mean = train.mean(axis=0)
    covariance = EmpiricalCovariance(assume_centered=True).fit(train - mean).covariance_
    eigvals, eigvecs = _ordered_eigh(covariance)
    logger.debug(f"Residual fit: D={dim}, num_principal={num_principal}, top eigenvalue {eigvals[0]:.6g}")
    return ResidualProjector(
        mean=mean, eigvecs=eigvecs, eigvals=eigvals, num_principal=int(num_principal),
        offset=None if offset is None else np.asarray(offset, dtype=np.float64),
    )


def residual_score(proj, query):
    """Negative norm of the residual-subspace component of (query - mean - offset)"""
    single = np.ndim(row_data(query)) == 1
    query = _matrix(query, "query").numpy()
    if query.shape[1] != proj.dim:
        raise DataError(f"Query dimension {query.shape[1]} does not match projector dimension {proj.dim}")
    coords = (query - proj.mean - proj.offset) @ proj.residual_basis
    scores = -np.linalg.norm(coords, axis=1)
    return float(scores[0]) if single else scores


@dataclass
class SweepRow:
    num_principal: int
    auroc_pct: float
    fpr95_pct: float


def residual_sweep(train, id_eval, ood_eval, stride=1, progress=False):
    """AUROC / FPR95 for every num_principal in 0..D at the given stride (D always included)"""
    if stride < 1:
        raise ConfigError("stride must be positive")
    base = fit_residual(train, num_principal=0)
    units = list(range(0, base.dim + 1, stride))
    if units[-1] != base.dim:
        units.append(base.dim)

    rows = []
    for num_principal in tqdm(units, desc='residual sweep', disable=not progress):
        proj = base.with_num_principal(num_principal)
        id_scores = residual_score(proj, id_eval)
        ood_scores = residual_score(proj, ood_eval)
        rows.append(SweepRow(num_principal, auroc(id_scores, ood_scores), fpr_at_tpr(id_scores, ood_scores)))
    return rows
