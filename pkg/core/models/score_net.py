"""
Time-conditioned (optionally class-conditioned) residual MLP score network.

The network approximates the score of the perturbed representation
distribution, s(z, t[, c]) ~ grad_z log p_t(z). Structure::

    h = W_in z + b_in
    for each block:
        u = W_1 h + b_1 + P_t emb_t(t) [+ P_c emb_c(c)]
        h = h + W_2 silu(u) + b_2
    s = (W_out h + b_out) / std(t)

emb_t and emb_c are Fourier feature embeddings whose frequencies are drawn
once from a seeded Gaussian and regenerated from ``embed_seed`` on load.

Flat parameter layout (the order of ``named_parameters``)::

    input.weight [H, D], input.bias [H]
    blocks.{i}.fc1.weight [H, H], blocks.{i}.fc1.bias [H]
    blocks.{i}.fc2.weight [H, H], blocks.{i}.fc2.bias [H]
    blocks.{i}.time_proj.weight [H, T], blocks.{i}.time_proj.bias [H]
    blocks.{i}.class_proj.weight [H, C], blocks.{i}.class_proj.bias [H]   (conditional only)
    head.weight [D, H], head.bias [D]
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from core.diffusion.sde import SdeSpec, kernel_unchecked
from core.utils.errors import ConfigError, DataError, NonFiniteError, NonFiniteLossError
from core.utils.helpers import derive_seed

logger = logging.getLogger(__name__)


MAX_CLASS_EMBED_DIM = 256


@dataclass(frozen=True)
class ScoreNetConfig:
    input_dim: int
    hidden_dim: int = 1024
    num_blocks: int = 12
    time_embed_dim: int = 128
    class_embed_dim: int = 256
    num_classes: Optional[int] = None
    time_embed_scale: float = 16.0
    class_embed_scale: float = 1.0
    embed_seed: int = 0

    def __post_init__(self):
        for name in ('input_dim', 'hidden_dim', 'num_blocks', 'time_embed_dim', 'class_embed_dim'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"net.{name} must be a positive integer, got {value}")
        if self.time_embed_dim % 2 or self.class_embed_dim % 2:
            raise ConfigError("Fourier embedding dimensions must be even")
        if self.class_embed_dim > MAX_CLASS_EMBED_DIM:
            raise ConfigError(f"net.class_embed_dim must be <= {MAX_CLASS_EMBED_DIM}")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigError("net.num_classes must be a positive integer")

    @property
    def conditional(self):
        return self.num_classes is not None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def expected_param_count(config):
    """Number of parameters implied by a config"""
    d, h = config.input_dim, config.hidden_dim
    per_block = 2 * (h * h + h) + (config.time_embed_dim * h + h)
    if config.conditional:
        per_block += config.class_embed_dim * h + h
    return (d * h + h) + config.num_blocks * per_block + (h * d + d)


def fourier_frequencies(dim, scale, seed):
    """Frozen Gaussian frequencies, float64, length dim / 2"""
    if dim % 2:
        raise ConfigError(f"Fourier embedding dimension must be even, got {dim}")
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(dim // 2, generator=generator, dtype=torch.float64) * scale


def fourier_embed(v, dim, scale=1.0, seed=0, frequencies=None):
    """Fourier features [sin(2 pi f v), cos(2 pi f v)] of a scalar or a batch of scalars"""
    if dim % 2:
        raise ConfigError(f"Fourier embedding dimension must be even, got {dim}")
    if frequencies is None:
        frequencies = fourier_frequencies(dim, scale, seed)
    v = torch.as_tensor(v, dtype=frequencies.dtype)
    angles = 2 * math.pi * v.unsqueeze(-1) * frequencies
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class FourierEmbedding(nn.Module):
    def __init__(self, dim, scale, seed):
        super().__init__()
        self.dim = dim
        self.register_buffer('frequencies', fourier_frequencies(dim, scale, seed).float(), persistent=False)

    def forward(self, v):
        return fourier_embed(v.to(self.frequencies.dtype), self.dim, frequencies=self.frequencies)


class ResidualBlock(nn.Module):
    def __init__(self, hidden_dim, time_embed_dim, class_embed_dim=None):
        super().__init__()
        self.fc1 = nn.Linear(hidden_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, hidden_dim)
        self.time_proj = nn.Linear(time_embed_dim, hidden_dim)
        self.class_proj = nn.Linear(class_embed_dim, hidden_dim) if class_embed_dim else None

    def forward(self, h, t_emb, c_emb=None):
        u = self.fc1(h) + self.time_proj(t_emb)
        if self.class_proj is not None:
            u = u + self.class_proj(c_emb)
        return h + self.fc2(nn.functional.silu(u))


class ScoreNet(nn.Module):
    def __init__(self, config, sde=None):
        super().__init__()
        self.config = config
        self.sde = sde or SdeSpec()
        h = config.hidden_dim
        class_dim = config.class_embed_dim if config.conditional else None

        self.input = nn.Linear(config.input_dim, h)
        self.time_embed = FourierEmbedding(config.time_embed_dim, config.time_embed_scale, config.embed_seed)
        self.class_embed = (
            FourierEmbedding(config.class_embed_dim, config.class_embed_scale, config.embed_seed + 1)
            if config.conditional else None
        )
        self.blocks = nn.ModuleList(
            ResidualBlock(h, config.time_embed_dim, class_dim) for _ in range(config.num_blocks)
        )
        self.head = nn.Linear(h, config.input_dim)

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def check_finite_parameters(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteError(f"Parameter {name} contains non-finite values")
        return self

    def _check_condition(self, c, batch):
        if not self.config.conditional:
            if c is not None:
                raise DataError("Unconditional model does not accept a class condition")
            return None
        if c is None:
            raise DataError("Conditional model requires a class condition")
        c = torch.as_tensor(c, dtype=torch.long)
        if c.dim() == 0:
            c = c.expand(batch)
        if c.shape != (batch,):
            raise DataError(f"Class condition shape {tuple(c.shape)} does not match batch {batch}")
        if ((c < 0) | (c >= self.config.num_classes)).any():
            raise DataError(f"Class id out of range [0, {self.config.num_classes})")
        return c

    def forward(self, z, t, c=None):
        squeeze = z.dim() == 1
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.config.input_dim:
            raise DataError(f"Expected input dimension {self.config.input_dim}, got {z.shape[-1]}")
        batch = z.shape[0]
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t.dim() == 0:
            t = t.expand(batch)
        c = self._check_condition(c, batch)

        t_emb = self.time_embed(t).to(z.dtype)
        c_emb = self.class_embed(c.to(z.dtype)).to(z.dtype) if c is not None else None
        h = self.input(z)
        for block in self.blocks:
            h = block(h, t_emb, c_emb)
        out = self.head(h) / kernel_unchecked(self.sde, t).std.unsqueeze(-1)
        return out.squeeze(0) if squeeze else out


def _uniform_(tensor, bound, generator):
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)


def init_model(config, sde=None, seed=0):
    """Reproducible initialization; the output head starts at zero"""
    model = ScoreNet(config, sde)
    shared = torch.Generator().manual_seed(int(seed))
    class_gen = torch.Generator().manual_seed(derive_seed(seed, 'class'))

    for module_name, module in model.named_modules():
        if not isinstance(module, nn.Linear):
            continue
        if module_name == 'head':
            nn.init.zeros_(module.weight)
            nn.init.zeros_(module.bias)
            continue
        generator = class_gen if module_name.endswith('class_proj') else shared
        bound = 1 / math.sqrt(module.in_features)
        _uniform_(module.weight, bound, generator)
        _uniform_(module.bias, bound, generator)

    count = model.param_count
    assert count == expected_param_count(config), "parameter layout drifted from config"
    logger.debug(f"Initialized score network: {count:,} parameters, seed {seed}")
    return model


def flat_parameters(model):
    return parameters_to_vector(model.parameters()).detach().clone()


def load_flat_parameters(model, flat):
    flat = torch.as_tensor(flat)
    if flat.numel() != expected_param_count(model.config):
        raise DataError(
            f"Parameter array has {flat.numel()} entries, config implies {expected_param_count(model.config)}"
        )
    first = next(model.parameters())
    with torch.no_grad():
        vector_to_parameters(flat.to(dtype=first.dtype, device=first.device), model.parameters())
    model.check_finite_parameters()
    return model


def backward(model, batch, loss_fn, batch_index=0):
    """Exact gradient of loss_fn(model, batch) w.r.t. every parameter, in flat layout"""
    params = list(model.parameters())
    loss = loss_fn(model, batch)
    if not torch.isfinite(torch.as_tensor(loss)).all():
        raise NonFiniteLossError(batch_index, float(loss))
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params), dtype=params[0].dtype)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])
