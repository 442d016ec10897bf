"""
On-disk formats. All integers and floats are little-endian.

REPZ  representation set
    magic 'REPZ' | version u16 | N u64 | D u32 | flags u32 (bit0: labels)
    | id_len u16 | dataset_id utf-8 | data N*D f32 | labels N i32 (bit0)
    | checksum (BLAKE2b-64 of every preceding byte)

RDM1  score network checkpoint
    magic 'RDM1' | version u16 | meta_len u32 | meta JSON utf-8
    | P u64 | parameters P values (f32 or f64, named in meta) | checksum

HEAD  linear classifier head, c = argmax(W z + b)
    magic 'HEAD' | K u32 | D u32 | W K*D f32 row-major | b K f32

Scores CSV: header ``index,logp_nats,bpd,nfe,label``.
"""

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from core.diffusion.sde import SdeSpec
from core.diffusion.trainer import Normalizer, predict_condition
from core.models.score_net import ScoreNet, ScoreNetConfig, flat_parameters, load_flat_parameters
from core.utils.errors import (
    ChecksumMismatchError,
    DataError,
    MagicMismatchError,
    MissingFileError,
    TruncatedFileError,
)
from core.utils.helpers import checksum64, ensure_output_path, format_file_size

logger = logging.getLogger(__name__)

REPZ_MAGIC = b'REPZ'
RDM1_MAGIC = b'RDM1'
HEAD_MAGIC = b'HEAD'
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8
FLAG_LABELS = 1
MAX_DIM = 65535

_REPZ_HEADER = struct.Struct('<4sHQII')
_U16 = struct.Struct('<H')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')
_HEAD_HEADER = struct.Struct('<4sII')
_RDM1_HEADER = struct.Struct('<4sHI')

SCORES_HEADER = ('index', 'logp_nats', 'bpd', 'nfe', 'label')

# Representation widths of the encoders commonly used as feature extractors
KNOWN_ENCODER_DIMS = {
    'bit': 2048,
    'repvgg': 2560,
    'resnet50d': 2048,
    'swin': 1024,
    'vit-b16': 768,
    'deit': 768,
    'mae': 768,
    'dino': 768,
    'dinov2': 768,
    'pathology-ssl': 384,
    'uni': 1024,
}

PARAM_DTYPE = '<f4'
_COMPUTE_DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass
class RepresentationSet:
    data: np.ndarray
    labels: Optional[np.ndarray] = None
    dataset_id: str = ''

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DataError(f"Representation data must be (N, D), got shape {self.data.shape}")
        if not 1 <= self.data.shape[1] <= MAX_DIM:
            raise DataError(f"D must lie in [1, {MAX_DIM}], got {self.data.shape[1]}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32).reshape(-1)
            if self.labels.shape[0] != self.data.shape[0]:
                raise DataError(f"{self.labels.shape[0]} labels for {self.data.shape[0]} rows")
            if (self.labels < 0).any():
                raise DataError("Labels must be nonnegative class ids")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def __len__(self):
        return self.n


def check_known_encoder(dataset_id, dim):
    """Warn when a known encoder id carries an unexpected width; returns True when consistent"""
    expected = KNOWN_ENCODER_DIMS.get(dataset_id.strip().lower())
    if expected is not None and expected != dim:
        logger.warning(f"Dataset {dataset_id!r} has D={dim}, the {dataset_id} encoder produces {expected}")
        return False
    return True


def _read_bytes(path, magic):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    raw = path.read_bytes()
    if len(raw) < len(magic):
        raise TruncatedFileError(path, len(magic), len(raw))
    if raw[:len(magic)] != magic:
        raise MagicMismatchError(path, magic, raw[:len(magic)])
    return path, raw


def _require(path, raw, size):
    if len(raw) < size:
        raise TruncatedFileError(path, size, len(raw))


def _verify_checksum(path, raw, body_end):
    if len(raw) > body_end + CHECKSUM_BYTES:
        raise DataError(f"{path}: {len(raw) - body_end - CHECKSUM_BYTES} unexpected trailing bytes")
    if checksum64(raw[:body_end]) != raw[body_end:body_end + CHECKSUM_BYTES]:
        raise ChecksumMismatchError(path)


def encode_reps(reps):
    dataset_id = reps.dataset_id.encode('utf-8')
    flags = FLAG_LABELS if reps.labels is not None else 0
    parts = [
        _REPZ_HEADER.pack(REPZ_MAGIC, FORMAT_VERSION, reps.n, reps.dim, flags),
        _U16.pack(len(dataset_id)),
        dataset_id,
        reps.data.astype('<f4').tobytes(),
    ]
    if reps.labels is not None:
        parts.append(reps.labels.astype('<i4').tobytes())
    body = b''.join(parts)
    return body + checksum64(body)


def write_reps(reps, path, force=False):
    path = ensure_output_path(path, force)
    path.write_bytes(encode_reps(reps))
    logger.info(f"Wrote {reps.n}x{reps.dim} representations to {path} ({format_file_size(path.stat().st_size)})")
    return path


def read_reps(path):
    path, raw = _read_bytes(path, REPZ_MAGIC)
    _require(path, raw, _REPZ_HEADER.size + _U16.size)
    _, version, n, dim, flags = _REPZ_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported REPZ version {version}")
    if not 1 <= dim <= MAX_DIM:
        raise DataError(f"{path}: D must lie in [1, {MAX_DIM}], got {dim}")

    offset = _REPZ_HEADER.size
    (id_len,) = _U16.unpack_from(raw, offset)
    offset += _U16.size
    has_labels = bool(flags & FLAG_LABELS)
    body_end = offset + id_len + 4 * n * dim + (4 * n if has_labels else 0)
    _require(path, raw, body_end + CHECKSUM_BYTES)
    _verify_checksum(path, raw, body_end)

    dataset_id = raw[offset:offset + id_len].decode('utf-8')
    offset += id_len
    data = np.frombuffer(raw, dtype='<f4', count=n * dim, offset=offset).reshape(n, dim)
    offset += 4 * n * dim
    labels = np.frombuffer(raw, dtype='<i4', count=n, offset=offset) if has_labels else None

    check_known_encoder(dataset_id, dim)
    logger.debug(f"Read {n}x{dim} representations from {path} (dataset {dataset_id!r})")
    return RepresentationSet(
        data=data.astype(np.float32),
        labels=None if labels is None else labels.astype(np.int32),
        dataset_id=dataset_id,
    )


@dataclass
class Checkpoint:
    model: ScoreNet
    sde: SdeSpec
    normalizer: Normalizer
    meta: dict


def _dtype_name(model):
    return 'float64' if next(model.parameters()).dtype == torch.float64 else 'float32'


def encode_checkpoint(model, sde, normalizer, extra=None):
    """Parameters are always stored as little-endian f32; compute_dtype records what the model ran in"""
    dtype_name = _dtype_name(model)
    meta = {
        'sde': sde.to_dict(),
        'net': model.config.to_dict(),
        'normalizer': normalizer.to_dict(),
        'compute_dtype': dtype_name,
        'param_count': model.param_count,
    }
    if extra:
        meta['extra'] = extra
    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')
    params = flat_parameters(model).cpu().numpy().astype(PARAM_DTYPE)
    body = b''.join([
        _RDM1_HEADER.pack(RDM1_MAGIC, FORMAT_VERSION, len(meta_bytes)),
        meta_bytes,
        _U64.pack(params.size),
        params.tobytes(),
    ])
    return body + checksum64(body)


def write_checkpoint(model, sde, normalizer, path, extra=None, force=False):
    path = ensure_output_path(path, force)
    path.write_bytes(encode_checkpoint(model, sde, normalizer, extra))
    logger.info(f"Wrote checkpoint ({model.param_count:,} parameters, {format_file_size(path.stat().st_size)}) to {path}")
    return path


def read_checkpoint(path):
    path, raw = _read_bytes(path, RDM1_MAGIC)
    _require(path, raw, _RDM1_HEADER.size)
    _, version, meta_len = _RDM1_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported RDM1 version {version}")
    offset = _RDM1_HEADER.size
    _require(path, raw, offset + meta_len + _U64.size)
    try:
        meta = json.loads(raw[offset:offset + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ChecksumMismatchError(path) from None
    offset += meta_len
    (count,) = _U64.unpack_from(raw, offset)
    offset += _U64.size
    torch_dtype = _COMPUTE_DTYPES.get(meta.get('compute_dtype'), torch.float32)
    body_end = offset + count * np.dtype(PARAM_DTYPE).itemsize
    _require(path, raw, body_end + CHECKSUM_BYTES)
    _verify_checksum(path, raw, body_end)

    sde = SdeSpec.from_dict(meta['sde'])
    config = ScoreNetConfig.from_dict(meta['net'])
    model = ScoreNet(config, sde).to(torch_dtype)
    params = np.frombuffer(raw, dtype=PARAM_DTYPE, count=count, offset=offset)
    load_flat_parameters(model, torch.from_numpy(params.copy()))
    model.eval()
    logger.debug(f"Loaded checkpoint {path}: D={config.input_dim}, blocks={config.num_blocks}, sde={sde.kind.value}")
    return Checkpoint(model=model, sde=sde, normalizer=Normalizer.from_dict(meta['normalizer']), meta=meta)


@dataclass
class ClassifierHead:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32).reshape(-1)
        if self.W.ndim != 2 or self.b.shape[0] != self.W.shape[0]:
            raise DataError(f"Head shapes W{self.W.shape} and b{self.b.shape} are inconsistent")

    @property
    def num_classes(self):
        return self.W.shape[0]

    def predict(self, z):
        return predict_condition(self.W, self.b, z)


def write_head(head, path, force=False):
    path = ensure_output_path(path, force)
    k, d = head.W.shape
    path.write_bytes(
        _HEAD_HEADER.pack(HEAD_MAGIC, k, d) + head.W.astype('<f4').tobytes() + head.b.astype('<f4').tobytes()
    )
    return path


def read_head(path):
    path, raw = _read_bytes(path, HEAD_MAGIC)
    _require(path, raw, _HEAD_HEADER.size)
    _, k, d = _HEAD_HEADER.unpack_from(raw)
    expected = _HEAD_HEADER.size + 4 * (k * d + k)
    _require(path, raw, expected)
    if len(raw) != expected:
        raise DataError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    W = np.frombuffer(raw, dtype='<f4', count=k * d, offset=_HEAD_HEADER.size).reshape(k, d)
    b = np.frombuffer(raw, dtype='<f4', count=k, offset=_HEAD_HEADER.size + 4 * k * d)
    return ClassifierHead(W=W.copy(), b=b.copy())


@dataclass
class ScoreRow:
    index: int
    logp_nats: float
    bpd: Optional[float] = None
    nfe: Optional[int] = None
    label: Optional[int] = None


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_scores(rows, path, force=False):
    path = ensure_output_path(path, force)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SCORES_HEADER)
        for row in rows:
            writer.writerow([_cell(row.index), _cell(float(row.logp_nats)), _cell(row.bpd), _cell(row.nfe), _cell(row.label)])
    logger.info(f"Wrote {len(rows)} scores to {path}")
    return path


def read_scores(path):
    """Scores CSV rows; rows whose score is missing or non-finite are dropped with a warning"""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    rows = []
    with open(path, newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != SCORES_HEADER:
            raise DataError(f"{path}: expected header {','.join(SCORES_HEADER)}")
        for line_no, record in enumerate(reader, start=2):
            if len(record) != len(SCORES_HEADER):
                raise DataError(f"{path}:{line_no}: expected {len(SCORES_HEADER)} columns")
            try:
                row = ScoreRow(
                    index=int(record[0]),
                    logp_nats=float(record[1]) if record[1] else math.nan,
                    bpd=float(record[2]) if record[2] else None,
                    nfe=int(record[3]) if record[3] else None,
                    label=int(record[4]) if record[4] else None,
                )
            except ValueError:
                raise DataError(f"{path}:{line_no}: unparsable row") from None
            if not math.isfinite(row.logp_nats):
                logger.warning(f"{path}:{line_no}: skipping row {row.index} without a finite score")
                continue
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no finite scores")
    return rows


def write_json(data, path, force=False):
    path = ensure_output_path(path, force)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    with open(path) as f:
        return json.load(f)
