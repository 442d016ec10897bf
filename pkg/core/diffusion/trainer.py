"""
Denoising score matching training of the score network.

One optimizer step draws t ~ U[t_min, 1] and eps ~ N(0, I) per row, perturbs
the (standardized) batch through the closed-form kernel and regresses
std(t) * s(z(t), t[, c]) onto -eps. AdamW, cosine annealing from lr to 0
over the whole schedule and global gradient-norm clipping.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_
from tqdm import tqdm

from config import Config
from core.diffusion.sde import _as_time, kernel_unchecked
from core.models.score_net import init_model
from core.utils.errors import ConfigError, DataError, NonFiniteLossError
from core.utils.helpers import as_row_tensor, derive_seed, require_finite

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    lr: float = 2e-3
    epochs: int = 200
    iterations: Optional[int] = None
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    t_min: float = 1e-5
    normalize_inputs: bool = True
    num_threads: int = Config.NUM_THREADS
    dtype: str = 'float32'

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.lr <= 0 or self.grad_clip_norm <= 0:
            raise ConfigError("train.lr and train.grad_clip_norm must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be nonnegative")
        if self.epochs < 0 or (self.iterations is not None and self.iterations < 0):
            raise ConfigError("train.epochs and train.iterations must be nonnegative")
        if not 0 < self.t_min < 1:
            raise ConfigError("train.t_min must lie in (0, 1)")
        if self.num_threads < 1:
            raise ConfigError("train.num_threads must be at least 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self):
        return asdict(self)


@dataclass
class Normalizer:
    """Per-dimension standardization z -> (z - mean) / scale, kept in float64"""
    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.float64).reshape(-1)
        self.scale = torch.as_tensor(self.scale, dtype=torch.float64).reshape(-1)
        if self.mean.shape != self.scale.shape:
            raise DataError("Normalizer mean and scale differ in length")
        if not (self.scale > 0).all():
            raise DataError("Normalizer scale must be positive")

    @classmethod
    def fit(cls, data, floor=SCALE_FLOOR):
        data = torch.as_tensor(data, dtype=torch.float64)
        return cls(mean=data.mean(0), scale=data.std(0, unbiased=False).clamp_min(floor))

    @classmethod
    def identity(cls, dim):
        return cls(mean=torch.zeros(dim), scale=torch.ones(dim))

    @property
    def dim(self):
        return self.mean.numel()

    def normalize(self, z):
        z = torch.as_tensor(z)
        return ((z.to(torch.float64) - self.mean) / self.scale).to(z.dtype)

    def denormalize(self, u):
        u = torch.as_tensor(u)
        return (u.to(torch.float64) * self.scale + self.mean).to(u.dtype)

    def log_det_jacobian(self):
        return float(-torch.log(self.scale).sum())

    def to_dict(self):
        return {'mean': self.mean.tolist(), 'scale': self.scale.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(mean=data['mean'], scale=data['scale'])


@dataclass
class FitResult:
    model: torch.nn.Module
    normalizer: Normalizer
    loss_trace: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)

    @property
    def steps(self):
        return len(self.lrs)

    def __iter__(self):
        return iter((self.model, self.normalizer, self.loss_trace))


def _call_model(model, z, t, labels):
    return model(z, t) if labels is None else model(z, t, labels)


def dsm_loss(model, spec, batch, labels, t_draws, noise, batch_index=None):
    """Mean over the batch of ||std(t) s(z(t), t[, c]) + eps||^2"""
    t_draws = _as_time(t_draws, batch)
    k = kernel_unchecked(spec, t_draws)
    mean_coeff, std = k.mean_coeff.unsqueeze(-1), k.std.unsqueeze(-1)
    perturbed = mean_coeff * batch + std * noise
    residual = std * _call_model(model, perturbed, t_draws, labels) + noise
    loss = (residual ** 2).sum(-1).mean()
    if batch_index is not None and not torch.isfinite(loss):
        raise NonFiniteLossError(batch_index, loss.item())
    return loss


def cosine_lr_factor(step, total_steps):
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1 + math.cos(math.pi * step / (total_steps - 1)))


def _global_grad_norm(params):
    norms = [p.grad.detach().norm(2) for p in params if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.norm(torch.stack(norms), 2))


def _batches(n_rows, batch_size, total_steps, generator):
    """Row-index batches: successive passes in random order, last short batch kept"""
    produced = 0
    while produced < total_steps:
        order = torch.randperm(n_rows, generator=generator)
        for start in range(0, n_rows, batch_size):
            if produced == total_steps:
                return
            yield order[start:start + batch_size]
            produced += 1


def _prepare(reps, net_cfg, labels):
    data = as_row_tensor(reps)
    if data.dim() == 1:
        data = data.unsqueeze(1)
    if data.shape[0] == 0:
        raise DataError("Cannot train on an empty representation set")
    if data.shape[1] != net_cfg.input_dim:
        raise DataError(f"Representations have dimension {data.shape[1]}, net.input_dim is {net_cfg.input_dim}")
    require_finite(data, "training representations")

    if labels is None and net_cfg.conditional:
        labels = getattr(reps, 'labels', None)
    if net_cfg.conditional:
        if labels is None:
            raise ConfigError("Class-conditioned training requires labels for every row")
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
        if labels.numel() != data.shape[0]:
            raise DataError(f"{labels.numel()} labels for {data.shape[0]} rows")
        if ((labels < 0) | (labels >= net_cfg.num_classes)).any():
            raise DataError(f"Labels must lie in [0, {net_cfg.num_classes})")
    else:
        labels = None
    return data.to(torch.float64), labels


def fit(reps, spec, net_cfg, cfg, labels=None, progress=False):
    """Train a score network; returns FitResult (unpacks as model, normalizer, loss trace)"""
    torch.set_num_threads(cfg.num_threads)
    if cfg.num_threads > 1:
        logger.warning(f"Training with {cfg.num_threads} threads; results are not bit-reproducible")

    data, labels = _prepare(reps, net_cfg, labels)
    n_rows, dim = data.shape
    normalizer = Normalizer.fit(data) if cfg.normalize_inputs else Normalizer.identity(dim)
    train_data = normalizer.normalize(data).to(cfg.torch_dtype)

    model = init_model(net_cfg, spec, seed=derive_seed(cfg.seed, 'init')).to(cfg.torch_dtype)
    steps_per_epoch = math.ceil(n_rows / cfg.batch_size)
    total_steps = cfg.iterations if cfg.iterations is not None else cfg.epochs * steps_per_epoch
    result = FitResult(model=model, normalizer=normalizer)
    if total_steps == 0:
        logger.info("No optimizer steps requested; returning the initialized model")
        return result

    logger.info(
        f"Training score network: N={n_rows}, D={dim}, steps={total_steps}, "
        f"threads={cfg.num_threads}, conditional={net_cfg.conditional}, sde={spec.kind.value}"
    )
    params = list(model.parameters())
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda k: cosine_lr_factor(k, total_steps))
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, 'train'))

    epoch_losses = []
    model.train()
    batches = _batches(n_rows, cfg.batch_size, total_steps, generator)
    for step, rows in enumerate(tqdm(batches, total=total_steps, desc='fit', unit='step', disable=not progress)):
        batch = train_data[rows]
        batch_labels = labels[rows] if labels is not None else None
        t_draws = cfg.t_min + (1 - cfg.t_min) * torch.rand(len(rows), generator=generator, dtype=cfg.torch_dtype)
        noise = torch.randn(batch.shape, generator=generator, dtype=cfg.torch_dtype)

        result.lrs.append(optimizer.param_groups[0]['lr'])
        optimizer.zero_grad(set_to_none=True)
        loss = dsm_loss(model, spec, batch, batch_labels, t_draws, noise, batch_index=step)
        loss.backward()
        clip_grad_norm_(params, cfg.grad_clip_norm)
        grad_norm = _global_grad_norm(params)
        result.grad_norms.append(grad_norm)
        optimizer.step()
        scheduler.step()
        epoch_losses.append(loss.item())
        logger.debug(f"step {step}: loss={loss.item():.6f} grad_norm={grad_norm:.6f}")

        if len(epoch_losses) == steps_per_epoch or step == total_steps - 1:
            mean_loss = float(np.mean(epoch_losses))
            result.loss_trace.append(mean_loss)
            logger.info(f"Epoch {len(result.loss_trace)}: mean loss {mean_loss:.6f}")
            epoch_losses = []

    model.eval()
    return result


def predict_condition(W, b, z):
    """Class id argmax(W z + b); ties go to the lowest index. z may be a (N, D) batch"""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64)
    if W.ndim != 2 or b.shape[0] != W.shape[0]:
        raise DataError(f"Head shapes W{W.shape} and b{b.shape} are inconsistent")
    if z.shape[-1] != W.shape[1]:
        raise DataError(f"Head expects dimension {W.shape[1]}, got {z.shape[-1]}")
    logits = z @ W.T + b
    picked = np.argmax(logits, axis=-1)
    return int(picked) if picked.ndim == 0 else picked.astype(np.int64)
