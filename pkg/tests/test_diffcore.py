from __future__ import annotations

import numpy as np
import pytest
import torch

from mvocc.components.config import CHECKPOINT_FORMAT_VERSION
from mvocc.components.diffcore import (CondNorm, Conv2d, Linear, ResidualBlock, adam_step, bilinear_sample,
                                       binary_cross_entropy, conv2d, forward_backward, global_avg_pool, linear,
                                       load_records, make_optimizer, optimizer_steps,
                                       read_checkpoint, write_checkpoint, zero_grads)
from mvocc.components.errors import (CheckpointIoError, MissingGrad, NameMismatch, NonScalarOutput,
                                     ShapeMismatch, VersionMismatch)

from conftest import gradients_match

SEEDS = range(20)


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)


# ── gradient checks ─────────────────────────────────────────────────────

@pytest.mark.parametrize('seed', SEEDS)
def test_linear_gradients(seed):
    gen = torch.Generator().manual_seed(seed)
    n_in, n_out = (int(v) for v in torch.randint(1, 6, (2,), generator=gen))
    x, w, b = _randn(gen, 3, n_in), _randn(gen, n_in, n_out), _randn(gen, n_out)
    assert gradients_match(linear, (x, w, b))


@pytest.mark.parametrize('seed', SEEDS)
def test_conv2d_gradients(seed):
    gen = torch.Generator().manual_seed(seed)
    stride = 1 + seed % 2
    c_in, c_out = (int(v) for v in torch.randint(1, 4, (2,), generator=gen))
    x, k, b = _randn(gen, 1, c_in, 4, 6), _randn(gen, c_out, c_in, 3, 3), _randn(gen, c_out)
    assert gradients_match(lambda x, k, b: conv2d(x, k, b, stride=stride), (x, k, b))


@pytest.mark.parametrize('seed', SEEDS)
def test_bilinear_sample_gradients(seed):
    gen = torch.Generator().manual_seed(seed)
    height, width = 5, 7
    maps = _randn(gen, 3, height, width)
    uv = torch.rand(4, 2, generator=gen, dtype=torch.float64)
    uv = (uv * torch.tensor([width - 1.2, height - 1.2], dtype=torch.float64) + 0.1).requires_grad_()
    assert gradients_match(bilinear_sample, (maps, uv))


@pytest.mark.parametrize('seed', SEEDS)
def test_cond_norm_gradients(seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    layer = CondNorm(4, cond_dim=3, norm_mode='batch' if seed % 2 else 'sample').double()
    layer.gamma.reset_parameters()
    layer.beta.reset_parameters()
    x, cond = _randn(gen, 6, 4), _randn(gen, 6, 3)
    assert gradients_match(layer, (x, cond))


@pytest.mark.parametrize('seed', SEEDS)
def test_residual_block_gradients(seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    block = ResidualBlock(4, cond_dim=2, normalize=True).double()
    for module in block.modules():
        if isinstance(module, Linear):
            module.reset_parameters()
    x, cond = _randn(gen, 6, 4), _randn(gen, 6, 2)
    assert gradients_match(block, (x, cond))


# ── layer examples ──────────────────────────────────────────────────────

def test_linear_examples():
    w = torch.eye(2)
    assert torch.equal(linear(torch.tensor([[3.0, 4.0]]), w, torch.zeros(2)), torch.tensor([[3.0, 4.0]]))
    w = torch.tensor([[1.0], [2.0]])
    assert torch.equal(linear(torch.tensor([[1.0, 1.0]]), w, torch.tensor([0.5])), torch.tensor([[3.5]]))


def test_linear_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        linear(torch.ones(1, 3), torch.ones(2, 2))


def test_conv2d_ones_kernel():
    out = conv2d(torch.ones(1, 1, 5, 5), torch.ones(1, 1, 3, 3))
    assert out.shape == (1, 1, 5, 5)
    assert out[0, 0, 2, 2].item() == 9.0
    assert out[0, 0, 0, 0].item() == 4.0
    assert conv2d(torch.ones(1, 1, 4, 4), torch.ones(1, 1, 3, 3), stride=2).shape == (1, 1, 2, 2)


def test_conv2d_rejects_odd_size_at_stride_two():
    with pytest.raises(ShapeMismatch):
        conv2d(torch.ones(1, 1, 5, 5), torch.ones(1, 1, 3, 3), stride=2)


def test_bilinear_sample_values():
    maps = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
    uv = torch.tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.5, 0.5], [-3.0, 5.0]])
    out = bilinear_sample(maps, uv)
    assert out.shape == (5, 1)
    assert torch.allclose(out[:, 0], torch.tensor([0.0, 1.0, 3.0, 1.5, 2.0]))


def test_bilinear_sample_channels():
    maps = torch.arange(2 * 3 * 3, dtype=torch.float64).reshape(2, 3, 3)
    out = bilinear_sample(maps, torch.tensor([[2.0, 1.0]], dtype=torch.float64))
    assert torch.equal(out, torch.tensor([[5.0, 14.0]], dtype=torch.float64))


def test_global_avg_pool():
    maps = torch.stack([torch.zeros(2, 3, 3), torch.ones(2, 3, 3)])
    assert torch.equal(global_avg_pool(maps), torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
    assert torch.allclose(global_avg_pool(torch.arange(4.0).reshape(1, 2, 2)), torch.tensor([1.5]))
    with pytest.raises(ShapeMismatch):
        global_avg_pool(torch.ones(3, 3))


def test_binary_cross_entropy_values():
    half = binary_cross_entropy(torch.full((4,), 0.5), torch.tensor([0, 1, 0, 1]))
    assert half.item() == pytest.approx(np.log(2.0))
    clamped = binary_cross_entropy(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0]))
    assert clamped.item() == pytest.approx(-np.log(1e-7))


def test_cond_norm_symmetric_pair():
    layer = CondNorm(1)
    out = layer(torch.tensor([[-2.0], [2.0]]))
    assert torch.allclose(out[:, 0], torch.tensor([-1.0, 1.0]), atol=1e-5)


def test_cond_norm_constant_input_gives_beta():
    layer = CondNorm(2, cond_dim=1)
    with torch.no_grad():
        layer.beta.bias.copy_(torch.tensor([0.25, -0.5]))
    out = layer(torch.full((3, 2), 7.0), torch.ones(3, 1))
    assert torch.allclose(out, torch.tensor([[0.25, -0.5]] * 3))


def test_cond_norm_condition_shape_checked():
    layer = CondNorm(2, cond_dim=3)
    with pytest.raises(ShapeMismatch):
        layer(torch.ones(4, 2), torch.ones(4, 2))


def test_residual_block_identity_at_init():
    block = ResidualBlock(8, cond_dim=4, normalize=True)
    x = torch.randn(16, 8)
    assert torch.equal(block(x, torch.randn(16, 4)), x)


def test_residual_block_hand_evaluated():
    block = ResidualBlock(1)
    with torch.no_grad():
        block.fc_0.weight.fill_(2.0)
        block.fc_0.bias.fill_(0.0)
        block.fc_1.weight.fill_(3.0)
        block.fc_1.bias.fill_(1.0)
    assert block(torch.tensor([[1.0]])).item() == pytest.approx(8.0)


# ── gradients / optimizer ───────────────────────────────────────────────

def test_forward_backward_needs_scalar():
    w = torch.ones(3, requires_grad=True)
    with pytest.raises(NonScalarOutput):
        forward_backward(w * 2.0)


def test_forward_backward_constant_output_gives_zero_grads():
    w = torch.ones(3, requires_grad=True)
    forward_backward(torch.tensor(5.0), parameters=[w])
    assert torch.equal(w.grad, torch.zeros(3))


def test_forward_backward_accumulates():
    w = torch.tensor([1.0, 2.0], requires_grad=True)
    forward_backward((w ** 2).sum())
    assert torch.equal(w.grad, torch.tensor([2.0, 4.0]))
    zero_grads([w])
    assert torch.equal(w.grad, torch.zeros(2))


def test_adam_zero_gradient_leaves_parameters():
    w = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    optimizer = make_optimizer([w], lr=0.1)
    w.grad = torch.zeros(2)
    for _ in range(3):
        adam_step(optimizer)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0]))


def test_adam_constant_gradient_moves_by_lr():
    w = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    optimizer = make_optimizer([w], lr=0.01)
    for k in range(1, 6):
        w.grad = torch.ones(1, dtype=torch.float64)
        adam_step(optimizer)
        assert w.item() == pytest.approx(-0.01 * k, rel=1e-6)
    assert optimizer_steps(optimizer) == 5


def test_adam_missing_grad():
    w = torch.nn.Parameter(torch.zeros(2))
    with pytest.raises(MissingGrad):
        adam_step(make_optimizer([w], lr=0.01))


# ── checkpoints ─────────────────────────────────────────────────────────

def test_checkpoint_round_trip(tmp_path):
    source = torch.nn.Sequential(Linear(3, 4), Conv2d(2, 2))
    target = torch.nn.Sequential(Linear(3, 4), Conv2d(2, 2))
    write_checkpoint(tmp_path / 'm.pt', source, header={'note': 'x'})
    payload = read_checkpoint(tmp_path / 'm.pt')
    assert payload['header'] == {'note': 'x'}
    load_records(target, payload['records'])
    for a, b in zip(source.state_dict().values(), target.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / 'm.pt'
    write_checkpoint(path, Linear(8, 8))
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointIoError):
        read_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointIoError):
        read_checkpoint(tmp_path / 'absent.pt')


def test_checkpoint_name_and_shape_mismatch(tmp_path):
    write_checkpoint(tmp_path / 'm.pt', Linear(3, 4))
    records = read_checkpoint(tmp_path / 'm.pt')['records']
    with pytest.raises(NameMismatch):
        load_records(Linear(3, 4, bias=False), records)
    with pytest.raises(ShapeMismatch):
        load_records(Linear(3, 5), records)


def test_checkpoint_version_mismatch(tmp_path):
    torch.save({'format_version': CHECKPOINT_FORMAT_VERSION + 1, 'header': {}, 'records': []}, tmp_path / 'm.pt')
    with pytest.raises(VersionMismatch):
        read_checkpoint(tmp_path / 'm.pt')
