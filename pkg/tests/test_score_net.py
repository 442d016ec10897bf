import math

import pytest
import torch

from core.diffusion.sde import SdeSpec, kernel
from core.models.score_net import (
    ScoreNetConfig,
    backward,
    expected_param_count,
    flat_parameters,
    fourier_embed,
    init_model,
    load_flat_parameters,
)
from core.utils.errors import ConfigError, DataError, NonFiniteError, NonFiniteLossError
from tests.conftest import make_small_model


def tiny_config(**kwargs):
    base = dict(input_dim=3, hidden_dim=8, num_blocks=2, time_embed_dim=4, class_embed_dim=4)
    base.update(kwargs)
    return ScoreNetConfig(**base)


def test_param_count_matches_layout():
    config = tiny_config()
    model = init_model(config)
    assert model.param_count == expected_param_count(config)
    # input 3*8+8, per block 2*(64+8) + (4*8+8), head 8*3+3
    assert expected_param_count(config) == 32 + 2 * (144 + 40) + 27


def test_conditional_adds_class_projection():
    plain, conditional = tiny_config(), tiny_config(num_classes=5)
    assert expected_param_count(conditional) - expected_param_count(plain) == 2 * (4 * 8 + 8)


@pytest.mark.parametrize('kwargs', [
    {'hidden_dim': 0},
    {'time_embed_dim': 3},
    {'class_embed_dim': 512},
    {'num_classes': 0},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        tiny_config(**kwargs)


def test_zero_head_gives_zero_score():
    model = init_model(tiny_config(), seed=3)
    out = model(torch.randn(4, 3), 0.5)
    assert torch.equal(out, torch.zeros(4, 3))


def test_init_is_reproducible():
    a = flat_parameters(init_model(tiny_config(), seed=7))
    b = flat_parameters(init_model(tiny_config(), seed=7))
    c = flat_parameters(init_model(tiny_config(), seed=8))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_unconditional_init_unchanged_by_class_branch():
    plain = init_model(tiny_config(), seed=1)
    conditional = init_model(tiny_config(num_classes=3), seed=1)
    assert torch.equal(plain.blocks[1].fc2.weight, conditional.blocks[1].fc2.weight)


def test_output_scaled_by_kernel_std():
    model = make_small_model(dim=2, sde=SdeSpec(kind='vp'))
    z = torch.randn(5, 2, dtype=torch.float64)
    t = 0.4
    h = model.input(z)
    t_emb = model.time_embed(torch.full((5,), t, dtype=torch.float64)).to(z.dtype)
    for block in model.blocks:
        h = block(h, t_emb)
    expected = model.head(h) / kernel(SdeSpec(kind='vp'), t).std
    assert torch.allclose(model(z, t), expected, atol=1e-12)


def test_single_vector_input():
    model = make_small_model(dim=2)
    z = torch.tensor([0.3, -0.1], dtype=torch.float64)
    assert torch.allclose(model(z, 0.5), model(z.unsqueeze(0), 0.5)[0])


def test_dimension_mismatch():
    model = init_model(tiny_config())
    with pytest.raises(DataError):
        model(torch.randn(2, 4), 0.5)


def test_condition_checks():
    conditional = init_model(tiny_config(num_classes=3))
    z = torch.randn(2, 3)
    with pytest.raises(DataError):
        conditional(z, 0.5)
    with pytest.raises(DataError):
        conditional(z, 0.5, torch.tensor([0, 3]))
    assert conditional(z, 0.5, torch.tensor([0, 2])).shape == (2, 3)
    with pytest.raises(DataError):
        init_model(tiny_config())(z, 0.5, torch.tensor([0, 1]))


def test_non_finite_parameters_rejected_on_load():
    model = init_model(tiny_config())
    assert model.check_finite_parameters() is model
    flat = flat_parameters(model)
    flat[5] = float('nan')
    with pytest.raises(NonFiniteError):
        load_flat_parameters(model, flat)


def test_flat_round_trip():
    source = make_small_model(dim=3, seed=2, dtype=torch.float32)
    target = init_model(source.config, seed=9)
    load_flat_parameters(target, flat_parameters(source))
    z = torch.randn(4, 3)
    assert torch.equal(source(z, 0.3), target(z, 0.3))


def test_flat_length_checked():
    model = init_model(tiny_config())
    with pytest.raises(DataError):
        load_flat_parameters(model, torch.zeros(5))


def test_fourier_embedding_properties():
    emb = fourier_embed(torch.tensor([0.0, 0.25, 1.0]), 16, scale=16.0, seed=0)
    assert emb.shape == (3, 16)
    assert torch.allclose(emb[:, :8] ** 2 + emb[:, 8:] ** 2, torch.ones(3, 8, dtype=emb.dtype))
    assert torch.equal(emb[0, 8:], torch.ones(8, dtype=emb.dtype))
    with pytest.raises(ConfigError):
        fourier_embed(0.5, 7)


def random_model(num_classes=None, seed=0, **kwargs):
    model = init_model(tiny_config(num_classes=num_classes, embed_seed=seed, **kwargs), seed=seed).double()
    generator = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        model.head.weight.copy_(0.3 * torch.randn(model.head.weight.shape, generator=generator, dtype=torch.float64))
        model.head.bias.copy_(0.1 * torch.randn(model.head.bias.shape, generator=generator, dtype=torch.float64))
    return model


def central_differences(model, loss_fn, batch, step=1e-4):
    base = flat_parameters(model)
    grad = torch.zeros_like(base)
    for i in range(base.numel()):
        for sign in (1.0, -1.0):
            shifted = base.clone()
            shifted[i] += sign * step
            load_flat_parameters(model, shifted)
            with torch.no_grad():
                grad[i] += sign * float(loss_fn(model, batch)) / (2 * step)
    load_flat_parameters(model, base)
    return grad


@pytest.mark.parametrize('num_classes', [None, 3])
def test_backward_matches_finite_differences(num_classes):
    model = random_model(num_classes=num_classes, seed=1)
    generator = torch.Generator().manual_seed(2)
    z = torch.randn(5, 3, generator=generator, dtype=torch.float64)
    target = torch.randn(5, 3, generator=generator, dtype=torch.float64)
    t = torch.linspace(0.3, 0.9, 5, dtype=torch.float64)
    c = torch.tensor([0, 1, 2, 1, 0]) if num_classes else None

    def loss_fn(m, b):
        return ((m(b, t, c) - target) ** 2).mean()

    analytic = backward(model, z, loss_fn)
    numeric = central_differences(model, loss_fn, z)
    assert analytic.shape == (model.param_count,)
    assert analytic.abs().max() > 0
    scale = torch.clamp(analytic.abs(), min=1e-3)
    assert ((analytic - numeric).abs() / scale).max().item() <= 1e-4


def test_backward_of_constant_loss_is_zero():
    model = random_model()
    grad = backward(model, torch.zeros(2, 3, dtype=torch.float64), lambda m, b: torch.tensor(1.5))
    assert torch.equal(grad, torch.zeros(model.param_count, dtype=grad.dtype))


def test_single_class_model_with_zeroed_class_path_matches_unconditional():
    plain = random_model(seed=4)
    conditional = init_model(tiny_config(num_classes=1, embed_seed=4), seed=4).double()
    conditional.load_state_dict(plain.state_dict(), strict=False)
    with torch.no_grad():
        for block in conditional.blocks:
            block.class_proj.weight.zero_()
            block.class_proj.bias.zero_()
    z = torch.randn(6, 3, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    t = torch.rand(6, generator=torch.Generator().manual_seed(6), dtype=torch.float64) * 0.9 + 0.05
    diff = (conditional(z, t, torch.zeros(6, dtype=torch.long)) - plain(z, t)).abs().max().item()
    assert diff <= 1e-12


def test_batch_forward_matches_single_rows():
    model = random_model(num_classes=2, seed=7)
    z = torch.randn(4, 3, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    t = torch.tensor([1e-5, 0.2, 0.6, 1.0], dtype=torch.float64)
    c = torch.tensor([1, 0, 1, 0])
    batch = model(z, t, c)
    rows = torch.stack([model(z[i], t[i], c[i]) for i in range(4)])
    assert torch.allclose(batch, rows, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize('seed', range(5))
def test_forward_finite_on_bounded_inputs(seed):
    model = random_model(seed=seed)
    generator = torch.Generator().manual_seed(seed)
    directions = torch.nn.functional.normalize(torch.randn(4, 3, generator=generator, dtype=torch.float64), dim=-1)
    z = torch.cat([directions * r for r in (0.0, 1.0, 10.0, 1e3)])
    for t in (1e-5, 1e-3, 0.5, 1.0):
        assert torch.isfinite(model(z, t)).all()


def test_fourier_frequencies_are_rederived_from_seed():
    v = torch.tensor(0.5, dtype=torch.float64)
    generator = torch.Generator().manual_seed(7)
    frequencies = 16.0 * torch.randn(8, generator=generator, dtype=torch.float64)
    angles = 2 * math.pi * 0.5 * frequencies
    expected = torch.cat([torch.sin(angles), torch.cos(angles)])
    assert torch.allclose(fourier_embed(v, 16, scale=16.0, seed=7), expected, rtol=0, atol=1e-12)

    config = tiny_config(embed_seed=7)
    model = init_model(config, seed=1)
    reloaded = init_model(config, seed=2)
    assert torch.equal(model.time_embed.frequencies, reloaded.time_embed.frequencies)
    assert 'time_embed.frequencies' not in model.state_dict()



def test_backward_reports_non_finite_loss():
    model = make_small_model(dim=2)
    with pytest.raises(NonFiniteLossError) as info:
        backward(model, torch.zeros(1, 2), lambda m, b: torch.tensor(math.inf), batch_index=4)
    assert info.value.batch_index == 4
