"""
Run configuration: defaults, a line-based ``key = value`` file with dotted
keys, and command-line overrides, in that order of increasing precedence.

    # example run.env
    sde.kind = vp
    train.lr = 0.002
    ode.atol = 1e-5
"""

import dataclasses
import logging
import typing
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values

from core.diffusion.likelihood import OdeConfig
from core.diffusion.sde import SdeSpec
from core.diffusion.trainer import TrainConfig
from core.models.score_net import ScoreNetConfig
from core.utils.errors import ConfigError, MissingFileError
from core.utils.helpers import derive_seed, parse_boolean

logger = logging.getLogger(__name__)


class Method(str, Enum):
    RDM = 'rdm'
    CONRDM = 'conrdm'
    KNN = 'knn'
    RESIDUAL = 'residual'


@dataclass(frozen=True)
class PathsConfig:
    train: Optional[str] = None
    query: Optional[str] = None
    checkpoint: Optional[str] = None
    head: Optional[str] = None
    output: Optional[str] = None


@dataclass(frozen=True)
class BaselineConfig:
    k: int = 50
    knn_normalize: bool = True
    num_principal: Optional[int] = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("baseline.k must be positive")
        if self.num_principal is not None and self.num_principal < 0:
            raise ConfigError("baseline.num_principal must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    method: Method = Method.RDM
    sde: SdeSpec = field(default_factory=SdeSpec)
    net: ScoreNetConfig = field(default_factory=lambda: ScoreNetConfig(input_dim=1))
    train: TrainConfig = field(default_factory=TrainConfig)
    ode: OdeConfig = field(default_factory=OdeConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def conditional(self):
        return self.method is Method.CONRDM

    def net_for(self, input_dim, num_classes=None):
        """Network config bound to the data dimension (and class count for conrdm)"""
        if self.conditional and num_classes is None and self.net.num_classes is None:
            raise ConfigError("conrdm needs the number of classes (labels or net.num_classes)")
        classes = (self.net.num_classes or num_classes) if self.conditional else None
        return replace(self.net, input_dim=input_dim, num_classes=classes)

    def to_dict(self):
        return {
            'seed': self.seed,
            'method': self.method.value,
            'sde': self.sde.to_dict(),
            'net': {k: v for k, v in self.net.to_dict().items() if k != 'input_dim'},
            'train': self.train.to_dict(),
            'ode': self.ode.to_dict(),
            'baseline': dataclasses.asdict(self.baseline),
            'paths': dataclasses.asdict(self.paths),
        }


_SECTIONS = ('sde', 'net', 'train', 'ode', 'baseline', 'paths')
_TOP_LEVEL = ('seed', 'method')


def _coerce(key, raw, annotation):
    if isinstance(raw, str):
        raw = raw.strip()
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        if raw is None or (isinstance(raw, str) and raw.lower() in ('', 'none', 'null')):
            return None
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    try:
        if isinstance(annotation, type) and issubclass(annotation, Enum):
            return annotation(str(raw).lower())
        if annotation is bool:
            return parse_boolean(raw)
        if annotation is int:
            if isinstance(raw, int) and not isinstance(raw, bool):
                return raw
            try:
                return int(raw)
            except ValueError:
                value = float(raw)
                if not value.is_integer():
                    raise
                return int(value)
        if annotation is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value for {key}: {raw!r}") from None


def _section_fields(section_cls):
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(section_cls)}


def read_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    values = dotenv_values(path)
    empty = [key for key, value in values.items() if value is None]
    if empty:
        raise ConfigError(f"{path}: keys without a value: {', '.join(empty)}")
    return values


def apply_overrides(config, values):
    """Apply dotted ``section.field`` overrides; unknown keys raise ConfigError"""
    top = {}
    sections = {name: {} for name in _SECTIONS}
    top_hints = typing.get_type_hints(RunConfig)
    for key, raw in values.items():
        key = key.strip()
        if key in _TOP_LEVEL:
            top[key] = _coerce(key, raw, top_hints[key])
            continue
        section, _, name = key.partition('.')
        if section not in sections or not name:
            raise ConfigError(f"Unknown config key: {key}")
        current = getattr(config, section)
        fields = _section_fields(type(current))
        if name not in fields or (section == 'net' and name == 'input_dim'):
            raise ConfigError(f"Unknown config key: {key}")
        sections[section][name] = _coerce(key, raw, fields[name])

    updates = dict(top)
    for section, changes in sections.items():
        if changes:
            updates[section] = replace(getattr(config, section), **changes)
    return replace(config, **updates)


def _explicit_keys(*sources):
    keys = set()
    for source in sources:
        keys.update(k.strip() for k in (source or {}))
    return keys


def load_run_config(path=None, overrides=None, seed=None):
    """
    Resolve the run configuration: defaults < config file < overrides < seed.

    Subsystem seeds not set explicitly are derived from the root seed:
    net.embed_seed from ('embed',), ode.probe_seed from ('probes',) and
    train.seed is the root seed itself (training derives ('train',) and
    ('init',) from it).
    """
    file_values = read_config_file(path) if path else {}
    config = apply_overrides(RunConfig(), file_values)
    config = apply_overrides(config, overrides or {})
    if seed is not None:
        config = replace(config, seed=int(seed))

    explicit = _explicit_keys(file_values, overrides)
    derived = {}
    if 'train.seed' not in explicit:
        derived['train.seed'] = config.seed
    if 'net.embed_seed' not in explicit:
        derived['net.embed_seed'] = derive_seed(config.seed, 'embed')
    if 'ode.probe_seed' not in explicit:
        derived['ode.probe_seed'] = derive_seed(config.seed, 'probes')
    config = apply_overrides(config, derived)
    logger.debug(f"Resolved run config: {config.to_dict()}")
    return config


def parse_set_options(options):
    """``--set key=value`` pairs to a dict"""
    values = {}
    for option in options or ():
        key, sep, value = option.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"Expected key=value, got {option!r}")
        values[key.strip()] = value.strip()
    return values
