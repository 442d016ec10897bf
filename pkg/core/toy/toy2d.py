"""
2-D validation suite: toy generators, ODE sampling from a trained model and
histogram KL / JSD between point sets.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from scipy.special import rel_entr
from tqdm import tqdm

from core.diffusion.likelihood import OdeConfig, integrate_flow
from core.diffusion.sde import SdeSpec, prior_sample
from core.diffusion.trainer import TrainConfig, fit
from core.models.score_net import ScoreNetConfig
from core.toy import constants as C
from core.utils.errors import ConfigError, DataError
from core.utils.helpers import derive_seed

logger = logging.getLogger(__name__)


class ToyName(str, Enum):
    EIGHT_GAUSSIANS = 'eight_gaussians'
    SPIRAL = 'spiral'
    CHECKERBOARD = 'checkerboard'
    RINGS = 'rings'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace('-', '_')
        aliases = {'8gaussians': 'eight_gaussians', 'eightgaussians': 'eight_gaussians', '8_gaussians': 'eight_gaussians'}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"Unknown toy dataset {value!r}; choose from {[n.value for n in cls]}") from None


@dataclass
class ToyDataset:
    name: ToyName
    points: np.ndarray

    def __len__(self):
        return self.points.shape[0]


def _eight_gaussians(rng, n, noise):
    mode = rng.integers(0, C.EIGHT_GAUSSIANS_MODES, n)
    angle = mode * (2 * np.pi / C.EIGHT_GAUSSIANS_MODES)
    centers = C.EIGHT_GAUSSIANS_RADIUS * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + noise * rng.standard_normal((n, 2))


def _spiral(rng, n, noise):
    theta = rng.uniform(0, C.SPIRAL_THETA_MAX_PI * np.pi, n)
    radius = C.SPIRAL_RADIUS_MAX * theta / (C.SPIRAL_THETA_MAX_PI * np.pi) + noise * rng.standard_normal(n)
    return radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _checkerboard(rng, n, noise=None):
    cells = C.CHECKERBOARD_CELLS
    dark = np.array([(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0])
    picked = dark[rng.integers(0, len(dark), n)]
    width = 2 * C.CHECKERBOARD_EXTENT / cells
    return -C.CHECKERBOARD_EXTENT + width * (picked + rng.uniform(0, 1, (n, 2)))


def _rings(rng, n, noise):
    radii = np.asarray(C.RINGS_RADII)
    radius = radii[rng.integers(0, len(radii), n)] + noise * rng.standard_normal(n)
    angle = rng.uniform(0, 2 * np.pi, n)
    return radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)


_GENERATORS = {
    ToyName.EIGHT_GAUSSIANS: (_eight_gaussians, C.EIGHT_GAUSSIANS_NOISE),
    ToyName.SPIRAL: (_spiral, C.SPIRAL_NOISE),
    ToyName.CHECKERBOARD: (_checkerboard, None),
    ToyName.RINGS: (_rings, C.RINGS_JITTER),
}


def sample_toy(name, n, seed=0, noise=None):
    """n points of a toy dataset; ``noise`` overrides the pinned noise level"""
    name = ToyName.parse(name)
    if n < 1:
        raise DataError(f"n must be at least 1, got {n}")
    generator, default_noise = _GENERATORS[name]
    rng = np.random.default_rng(int(seed))
    points = generator(rng, int(n), default_noise if noise is None else noise)
    return ToyDataset(name=name, points=points.astype(np.float64))


@dataclass(frozen=True)
class HistogramGrid:
    extent: float = C.HISTOGRAM_EXTENT
    bins_per_axis: int = C.HISTOGRAM_BINS
    eps: float = C.HISTOGRAM_EPS

    @property
    def edges(self):
        return np.linspace(-self.extent, self.extent, self.bins_per_axis + 1)

    def counts(self, points):
        """Bin counts; points outside the extent land in the border bins"""
        points = np.clip(np.asarray(points, dtype=np.float64), -self.extent, self.extent)
        counts, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=[self.edges, self.edges])
        return counts

    def probabilities(self, points):
        smoothed = self.counts(points) + self.eps
        return smoothed / smoothed.sum()


@dataclass
class Divergence:
    kl: float
    jsd: float


def kl_jsd(reference, generated, grid=None):
    """KL(reference || generated) and Jensen-Shannon divergence in nats"""
    grid = grid or HistogramGrid()
    reference = np.asarray(getattr(reference, 'points', reference), dtype=np.float64)
    generated = np.asarray(getattr(generated, 'points', generated), dtype=np.float64)
    if reference.size == 0 or generated.size == 0:
        raise DataError("kl_jsd needs two non-empty point sets")
    if reference.shape[-1] != 2 or generated.shape[-1] != 2:
        raise DataError("kl_jsd works on 2-D point sets")
    p = grid.probabilities(reference)
    q = grid.probabilities(generated)
    m = 0.5 * (p + q)
    kl = float(rel_entr(p, q).sum())
    jsd = float(0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum())
    return Divergence(kl=max(kl, 0.0), jsd=min(max(jsd, 0.0), np.log(2)))


def _model_dim(model, normalizer):
    config = getattr(model, 'config', None)
    if config is not None:
        return config.input_dim
    if normalizer is not None:
        return normalizer.dim
    raise DataError("Cannot infer the sample dimension; pass dim explicitly")


def ode_sample(model, spec, normalizer, n, cfg=None, seed=0, dim=None, labels=None, progress=False):
    """Prior draws (one derived seed per sample) transported from t_max back to t_min"""
    cfg = cfg or OdeConfig()
    dim = dim or _model_dim(model, normalizer)
    first = next(model.parameters(), None) if isinstance(model, torch.nn.Module) else None
    dtype = first.dtype if first is not None else torch.float64

    z1 = torch.cat([
        prior_sample(spec, 1, dim, torch.Generator().manual_seed(derive_seed(seed, i)), dtype)
        for i in range(n)
    ]) if n else torch.zeros(0, dim, dtype=dtype)
    c = None if labels is None else torch.as_tensor(labels, dtype=torch.long).expand(n)

    samples, kept = [], []
    for start in tqdm(range(0, n, cfg.chunk_size), desc='ode sample', unit='chunk', disable=not progress):
        chunk = z1[start:start + cfg.chunk_size]
        solution = integrate_flow(
            model, spec, chunk, cfg.t_max, cfg.t_min, cfg,
            c=None if c is None else c[start:start + cfg.chunk_size], raise_on_failure=False,
        )
        ok = ~solution.failed
        for row, failure in solution.failures.items():
            logger.warning(f"Dropping sample {start + row}: {failure}")
        samples.append(solution.y[ok])
        kept.append(int(ok.sum()))

    out = torch.cat(samples) if samples else torch.zeros(0, dim, dtype=dtype)
    if normalizer is not None:
        out = normalizer.denormalize(out)
    if sum(kept) < n:
        logger.warning(f"ODE sampling kept {sum(kept)} of {n} samples")
    return out.detach().to(torch.float64).numpy()


@dataclass
class ToyResult:
    dataset: ToyName
    kl_nats: float
    jsd_nats: float
    n_ref: int
    n_gen: int
    seed: int
    samples: np.ndarray = field(repr=False)
    loss_trace: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            'dataset': self.dataset.value, 'kl_nats': self.kl_nats, 'jsd_nats': self.jsd_nats,
            'n_ref': self.n_ref, 'n_gen': self.n_gen, 'seed': self.seed,
        }


def toy_net_config(seed=0, hidden_dim=C.TOY_HIDDEN_DIM, num_blocks=C.TOY_NUM_BLOCKS):
    return ScoreNetConfig(input_dim=2, hidden_dim=hidden_dim, num_blocks=num_blocks, embed_seed=derive_seed(seed, 'embed'))


def run_toy_benchmark(name, seed=0, iterations=C.TOY_ITERATIONS, n_samples=C.TOY_SAMPLES,
                      train_points=C.TOY_TRAIN_POINTS, spec=None, net_cfg=None, train_cfg=None,
                      ode_cfg=None, progress=False):
    """Train on a toy dataset, ODE-sample it and score the samples against fresh reference draws"""
    name = ToyName.parse(name)
    spec = spec or SdeSpec()
    net_cfg = net_cfg or toy_net_config(seed)
    train_cfg = train_cfg or TrainConfig(batch_size=C.TOY_BATCH_SIZE, iterations=iterations, seed=seed)
    ode_cfg = ode_cfg or OdeConfig()

    train = sample_toy(name, train_points, seed=derive_seed(seed, 'toy', name.value, 'train'))
    result = fit(train.points, spec, net_cfg, train_cfg, progress=progress)
    generated = ode_sample(
        result.model, spec, result.normalizer, n_samples, ode_cfg,
        seed=derive_seed(seed, 'toy', name.value, 'sample'), progress=progress,
    )
    reference = sample_toy(name, n_samples, seed=derive_seed(seed, 'toy', name.value, 'reference'))
    divergence = kl_jsd(reference.points, generated)
    logger.info(f"Toy {name.value} seed {seed}: KL={divergence.kl:.4f} JSD={divergence.jsd:.4f}")
    return ToyResult(
        dataset=name, kl_nats=divergence.kl, jsd_nats=divergence.jsd,
        n_ref=len(reference), n_gen=generated.shape[0], seed=seed,
        samples=generated, loss_trace=result.loss_trace,
    )
