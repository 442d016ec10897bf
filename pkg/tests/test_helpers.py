import math

import numpy as np
import pytest
import torch

from core.io.formats import RepresentationSet
from core.toy.toy2d import sample_toy
from core.utils.errors import ConfigError, DataError, NonFiniteError, RdmError, SolverError
from core.utils.helpers import (
    checksum64,
    derive_seed,
    as_row_tensor,
    ensure_output_path,
    format_file_size,
    get_file_hash,
    parse_boolean,
    require_finite,
    row_data,
)


def test_derive_seed_is_stable_and_path_sensitive():
    assert derive_seed(0, 'train') == derive_seed(0, 'train')
    assert derive_seed(0, 'train') != derive_seed(0, 'init')
    assert derive_seed(0, 'a', 'b') != derive_seed(0, 'ab')
    assert derive_seed(1, 'train') != derive_seed(0, 'train')
    assert 0 <= derive_seed(12345, 7) < 2 ** 63


def test_checksum64():
    assert len(checksum64(b'abc')) == 8
    assert checksum64(b'abc') != checksum64(b'abd')


def test_get_file_hash(tmp_path):
    path = tmp_path / 'x.bin'
    path.write_bytes(b'hello')
    assert get_file_hash(path) == '2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824'


@pytest.mark.parametrize('size, expected', [(0, '0.00 B'), (512, '512.00 B'), (2048, '2.00 KB'), (3 * 1024 ** 2, '3.00 MB')])
def test_format_file_size(size, expected):
    assert format_file_size(size) == expected


def test_parse_boolean():
    assert parse_boolean(' Yes ') is True
    assert parse_boolean('off') is False
    assert parse_boolean(1) is True
    with pytest.raises(ConfigError):
        parse_boolean('maybe')


def test_ensure_output_path(tmp_path):
    target = tmp_path / 'deep' / 'dir' / 'out.csv'
    assert ensure_output_path(target) == target
    assert target.parent.is_dir()
    target.write_text('x')
    with pytest.raises(ConfigError):
        ensure_output_path(target)
    assert ensure_output_path(target, force=True) == target


def test_require_finite():
    values = torch.tensor([1.0, 2.0])
    assert require_finite(values, 'values') is values
    with pytest.raises(NonFiniteError):
        require_finite(torch.tensor([math.nan]), 'values')


def test_exit_codes():
    assert ConfigError('x').exit_code == 2
    assert DataError('x').exit_code == 3
    assert SolverError('max_steps', 0.5).exit_code == 4
    assert issubclass(ConfigError, RdmError) and issubclass(ConfigError, ValueError)


def test_row_data_unwraps_containers_only():
    array = np.arange(6, dtype=np.float64).reshape(3, 2)
    assert row_data(array) is array
    tensor = torch.zeros(2, 2)
    assert row_data(tensor) is tensor
    reps = RepresentationSet(data=array)
    assert row_data(reps) is reps.data
    toy = sample_toy('rings', 5, seed=0)
    assert row_data(toy) is toy.points


def test_as_row_tensor():
    array = np.arange(6, dtype=np.float64).reshape(3, 2)
    assert torch.equal(as_row_tensor(array), torch.from_numpy(array))
    assert as_row_tensor([[1.0, 2.0]]).shape == (1, 2)
    assert as_row_tensor(RepresentationSet(data=array)).dtype == torch.float32
