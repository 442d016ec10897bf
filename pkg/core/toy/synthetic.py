"""
Synthetic representation-space OOD task.

ID is an 8-component isotropic Gaussian mixture in D dimensions; OOD is the
same mixture shifted by ``shift`` component standard deviations along one
fixed unit direction, orthogonal to the span of the component centers when
D exceeds that span. Component indices double as class labels.
"""

import logging
from dataclasses import dataclass

import numpy as np

from core.utils.errors import ConfigError
from core.utils.helpers import derive_seed

logger = logging.getLogger(__name__)

NUM_COMPONENTS = 8
CENTER_SCALE = 3.0
COMPONENT_STD = 1.0
DEFAULT_SHIFT = 4.0


@dataclass
class SyntheticSplit:
    data: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.data.shape[0]


@dataclass
class SyntheticTask:
    centers: np.ndarray
    direction: np.ndarray
    train: SyntheticSplit
    id_eval: SyntheticSplit
    ood_eval: SyntheticSplit

    @property
    def dim(self):
        return self.centers.shape[1]


def _draw(rng, centers, n, offset):
    labels = rng.integers(0, len(centers), n)
    data = centers[labels] + COMPONENT_STD * rng.standard_normal((n, centers.shape[1])) + offset
    return SyntheticSplit(data=data.astype(np.float32), labels=labels.astype(np.int32))


def make_task(dim=8, n_train=40960, n_eval=4096, shift=DEFAULT_SHIFT, seed=0):
    if dim < 1 or n_train < 1 or n_eval < 1:
        raise ConfigError("dim, n_train and n_eval must be positive")
    layout = np.random.default_rng(derive_seed(seed, 'synth', 'layout'))
    centers = CENTER_SCALE * layout.standard_normal((NUM_COMPONENTS, dim))
    direction = layout.standard_normal(dim)
    # off the span of the centers when D leaves room for it
    _, singular, vt = np.linalg.svd(centers - centers.mean(0))
    rank = int((singular > 1e-8 * singular.max()).sum())
    if rank < dim:
        direction -= vt[:rank].T @ (vt[:rank] @ direction)
    direction /= np.linalg.norm(direction)

    offset = shift * COMPONENT_STD * direction
    task = SyntheticTask(
        centers=centers,
        direction=direction,
        train=_draw(np.random.default_rng(derive_seed(seed, 'synth', 'train')), centers, n_train, 0.0),
        id_eval=_draw(np.random.default_rng(derive_seed(seed, 'synth', 'id')), centers, n_eval, 0.0),
        ood_eval=_draw(np.random.default_rng(derive_seed(seed, 'synth', 'ood')), centers, n_eval, offset),
    )
    logger.info(f"Synthetic task: D={dim}, train={n_train}, eval={n_eval}, shift={shift} std")
    return task
