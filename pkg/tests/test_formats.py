import logging
import math

import numpy as np
import pytest
import torch

from core.diffusion.sde import SdeSpec
from core.diffusion.trainer import Normalizer
from core.io.formats import (
    ClassifierHead,
    RepresentationSet,
    ScoreRow,
    check_known_encoder,
    read_checkpoint,
    read_head,
    read_json,
    read_reps,
    read_scores,
    write_checkpoint,
    write_head,
    write_json,
    write_reps,
    write_scores,
)
from core.models.score_net import flat_parameters
from core.utils.errors import (
    ChecksumMismatchError,
    ConfigError,
    DataError,
    MagicMismatchError,
    MissingFileError,
    TruncatedFileError,
)
from tests.conftest import make_small_model


@pytest.fixture
def reps():
    rng = np.random.default_rng(0)
    return RepresentationSet(
        data=rng.normal(size=(12, 5)).astype(np.float32),
        labels=rng.integers(0, 3, 12),
        dataset_id='unit-test',
    )


def test_reps_round_trip(tmp_path, reps):
    path = write_reps(reps, tmp_path / 'a.repz')
    loaded = read_reps(path)
    assert np.array_equal(loaded.data, reps.data)
    assert np.array_equal(loaded.labels, reps.labels)
    assert loaded.dataset_id == 'unit-test'
    assert (loaded.n, loaded.dim) == (12, 5)


def test_reps_without_labels(tmp_path):
    reps = RepresentationSet(data=np.ones((3, 2)), dataset_id='')
    loaded = read_reps(write_reps(reps, tmp_path / 'b.repz'))
    assert loaded.labels is None
    assert loaded.data.dtype == np.float32


def test_reps_read_errors_are_distinct(tmp_path, reps):
    path = write_reps(reps, tmp_path / 'c.repz')
    raw = path.read_bytes()

    with pytest.raises(MissingFileError):
        read_reps(tmp_path / 'missing.repz')

    (tmp_path / 'magic.repz').write_bytes(b'NOPE' + raw[4:])
    with pytest.raises(MagicMismatchError):
        read_reps(tmp_path / 'magic.repz')

    (tmp_path / 'short.repz').write_bytes(raw[:-20])
    with pytest.raises(TruncatedFileError):
        read_reps(tmp_path / 'short.repz')

    corrupted = bytearray(raw)
    corrupted[40] ^= 0xFF
    (tmp_path / 'flip.repz').write_bytes(bytes(corrupted))
    with pytest.raises(ChecksumMismatchError):
        read_reps(tmp_path / 'flip.repz')

    (tmp_path / 'long.repz').write_bytes(raw + b'\x00')
    with pytest.raises(DataError):
        read_reps(tmp_path / 'long.repz')


def test_representation_set_validation():
    with pytest.raises(DataError):
        RepresentationSet(data=np.zeros(4))
    with pytest.raises(DataError):
        RepresentationSet(data=np.zeros((2, 2)), labels=[0])
    with pytest.raises(DataError):
        RepresentationSet(data=np.zeros((2, 2)), labels=[0, -1])


def test_known_encoder_width_warning(tmp_path, caplog):
    assert check_known_encoder('vit-b16', 768)
    with caplog.at_level(logging.WARNING, logger='core.io.formats'):
        reps = RepresentationSet(data=np.zeros((2, 4)), dataset_id='vit-b16')
        read_reps(write_reps(reps, tmp_path / 'vit.repz'))
    assert any('vit-b16' in r.getMessage() for r in caplog.records)


def test_write_refuses_overwrite(tmp_path, reps):
    path = write_reps(reps, tmp_path / 'd.repz')
    with pytest.raises(ConfigError):
        write_reps(reps, path)
    write_reps(reps, path, force=True)


def test_checkpoint_round_trip(tmp_path):
    sde = SdeSpec(kind='vp', beta_max=10.0)
    model = make_small_model(dim=3, sde=sde, num_classes=4, dtype=torch.float32)
    normalizer = Normalizer(mean=[1.0, 2.0, 3.0], scale=[0.5, 1.0, 2.0])
    path = write_checkpoint(model, sde, normalizer, tmp_path / 'm.rdm', extra={'method': 'conrdm'})
    checkpoint = read_checkpoint(path)

    assert checkpoint.sde == sde
    assert checkpoint.model.config == model.config
    assert torch.equal(flat_parameters(checkpoint.model), flat_parameters(model))
    assert checkpoint.normalizer.scale.tolist() == [0.5, 1.0, 2.0]
    assert checkpoint.meta['extra'] == {'method': 'conrdm'}
    assert checkpoint.meta['param_count'] == model.param_count

    z = torch.randn(2, 3)
    c = torch.tensor([0, 3])
    assert torch.equal(checkpoint.model(z, 0.5, c), model(z, 0.5, c))


def test_float64_checkpoint_stores_f32_parameters(tmp_path):
    model = make_small_model(dim=3, dtype=torch.float64)
    path = write_checkpoint(model, SdeSpec(), Normalizer.identity(3), tmp_path / 'm.rdm')
    checkpoint = read_checkpoint(path)

    assert checkpoint.meta['compute_dtype'] == 'float64'
    loaded = flat_parameters(checkpoint.model)
    assert loaded.dtype == torch.float64
    assert torch.equal(loaded, flat_parameters(model).to(torch.float32).to(torch.float64))
    raw = path.read_bytes()
    assert raw.endswith(loaded.numpy().astype('<f4').tobytes() + raw[-8:])


def test_checkpoint_bytes_are_deterministic(tmp_path):
    model = make_small_model(dim=2)
    a = write_checkpoint(model, SdeSpec(), Normalizer.identity(2), tmp_path / 'a.rdm').read_bytes()
    b = write_checkpoint(model, SdeSpec(), Normalizer.identity(2), tmp_path / 'b.rdm').read_bytes()
    assert a == b


def test_checkpoint_corruption(tmp_path):
    path = write_checkpoint(make_small_model(dim=2), SdeSpec(), Normalizer.identity(2), tmp_path / 'c.rdm')
    raw = bytearray(path.read_bytes())
    raw[-12] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatchError):
        read_checkpoint(path)
    with pytest.raises(MagicMismatchError):
        read_checkpoint(write_reps(RepresentationSet(data=np.zeros((1, 2))), tmp_path / 'r.repz'))


def test_head_round_trip(tmp_path):
    head = ClassifierHead(W=np.eye(3)[:2], b=[0.0, 0.5])
    loaded = read_head(write_head(head, tmp_path / 'h.head'))
    assert np.array_equal(loaded.W, head.W) and np.array_equal(loaded.b, head.b)
    assert loaded.num_classes == 2
    assert loaded.predict([1.0, 0.0, 0.0]) == 0
    assert loaded.predict([0.0, 1.0, 0.0]) == 1


def test_head_errors(tmp_path):
    with pytest.raises(DataError):
        ClassifierHead(W=np.eye(2), b=[0.0])
    path = write_head(ClassifierHead(W=np.eye(2), b=[0.0, 0.0]), tmp_path / 'h.head')
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        read_head(path)


def test_scores_round_trip(tmp_path):
    rows = [
        ScoreRow(0, -1.2345678901234567, 0.89, 43, 2),
        ScoreRow(1, -0.1, None, None, None),
    ]
    loaded = read_scores(write_scores(rows, tmp_path / 's.csv'))
    assert loaded == rows
    assert (tmp_path / 's.csv').read_text().splitlines()[0] == 'index,logp_nats,bpd,nfe,label'


def test_scores_skip_non_finite(tmp_path, caplog):
    rows = [ScoreRow(0, -1.0), ScoreRow(1, math.nan), ScoreRow(2, -3.0)]
    with caplog.at_level(logging.WARNING):
        loaded = read_scores(write_scores(rows, tmp_path / 's.csv'))
    assert [r.index for r in loaded] == [0, 2]
    assert 'row 1' in caplog.text


def test_scores_format_errors(tmp_path):
    with pytest.raises(MissingFileError):
        read_scores(tmp_path / 'none.csv')
    bad = tmp_path / 'bad.csv'
    bad.write_text('idx,score\n0,1.0\n')
    with pytest.raises(DataError):
        read_scores(bad)
    empty = tmp_path / 'empty.csv'
    write_scores([ScoreRow(0, math.nan)], empty)
    with pytest.raises(DataError):
        read_scores(empty)


def test_json_helpers(tmp_path):
    path = write_json({'b': 1, 'a': [1.5]}, tmp_path / 'r.json')
    assert path.read_text().startswith('{\n  "a"')
    assert read_json(path) == {'a': [1.5], 'b': 1}
