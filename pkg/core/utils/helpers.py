import hashlib
import os
from pathlib import Path

import numpy as np
import torch

from core.utils.errors import ConfigError, NonFiniteError


def derive_seed(root_seed, *path):
    """Derive a reproducible 63-bit subsystem seed from the root seed"""
    key = "/".join(str(part) for part in (root_seed, *path))
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def checksum64(data):
    """64-bit BLAKE2b content checksum"""
    return hashlib.blake2b(data, digest_size=8).digest()


def get_file_hash(file_path):
    """Calculate SHA256 hash of file"""
    sha256_hash = hashlib.sha256()

    with open(file_path, "rb") as f:
        for byte_block in iter(lambda: f.read(4096), b""):
            sha256_hash.update(byte_block)

    return sha256_hash.hexdigest()


def format_file_size(size_bytes):
    """Format file size in human readable format"""
    for unit in ['B', 'KB', 'MB', 'GB']:
        if size_bytes < 1024.0:
            return f"{size_bytes:.2f} {unit}"
        size_bytes /= 1024.0
    return f"{size_bytes:.2f} TB"


def parse_boolean(value):
    """Parse boolean from string"""
    if isinstance(value, bool):
        return value

    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ['true', 'yes', '1', 'on']:
            return True
        if lowered in ['false', 'no', '0', 'off']:
            return False
        raise ConfigError(f"Not a boolean: {value!r}")

    return bool(value)


def ensure_output_path(path, force=False):
    """Refuse to overwrite an existing output unless forced; create parent dirs"""
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError(f"Output exists: {path} (use --force to overwrite)")
    os.makedirs(path.parent, exist_ok=True)
    return path


def require_finite(tensor, what):
    if not torch.isfinite(torch.as_tensor(tensor)).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return tensor


def row_data(reps):
    """Rows of a RepresentationSet or ToyDataset; arrays, tensors and lists pass through"""
    if isinstance(reps, (torch.Tensor, np.ndarray, list, tuple)):
        return reps
    for attr in ('data', 'points'):
        if hasattr(reps, attr):
            return getattr(reps, attr)
    return reps


def as_row_tensor(reps):
    data = row_data(reps)
    if isinstance(data, torch.Tensor):
        return data
    return torch.as_tensor(np.asarray(data))
