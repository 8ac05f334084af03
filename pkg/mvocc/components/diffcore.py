"""
Differentiable building blocks on top of torch: shape-checked functional
layers, the parameterized modules the network is assembled from, gradient
plumbing, the Adam optimizer and checkpoint records
"""
from __future__ import annotations

import logging
import math
import pickle
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .config import CHECKPOINT_FORMAT_VERSION
from .errors import (CheckpointIoError, MissingGrad, NameMismatch, NonScalarOutput,
                     ShapeMismatch, VersionMismatch)

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def set_determinism(seed, threads=1):
    torch.manual_seed(int(seed))
    torch.set_num_threads(max(1, int(threads)))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def forward_backward(output, parameters=None, retain_graph=False):
    """Accumulate d(output)/d(param) into .grad of every reachable parameter

    Args:
        output: scalar tensor
        parameters: optional iterable; any of these left without a gradient
            (unreachable or constant output) receive an explicit zero grad
        retain_graph: keep the graph so the call can be repeated

    Raises:
        NonScalarOutput: output has more than one element
    """
    if output.numel() != 1:
        raise NonScalarOutput(f'backward needs a scalar, got shape {tuple(output.shape)}')
    if output.requires_grad:
        output.backward(retain_graph=retain_graph)
    if parameters is not None:
        for p in parameters:
            if p.requires_grad and p.grad is None:
                p.grad = torch.zeros_like(p)


def zero_grads(parameters):
    for p in parameters:
        if p.grad is not None:
            p.grad.detach_()
            p.grad.zero_()


# ---------------------------------------------------------------------------
# Functional layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """y = x W + b with W laid out (in, out)"""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f'linear: input width {x.shape[-1]} vs weight {tuple(weight.shape)}')
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f'linear: bias {tuple(bias.shape)} vs {weight.shape[1]} outputs')
    y = x @ weight
    return y + bias if bias is not None else y


def conv2d(x, kernels, bias=None, stride=1, padding=None):
    """Cross-correlation with zero padding (k // 2 by default), stride 1 or 2"""
    if x.dim() != 4 or kernels.dim() != 4:
        raise ShapeMismatch(f'conv2d: expected 4-D input and kernels, got {x.dim()} and {kernels.dim()}')
    if x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f'conv2d: {x.shape[1]} input channels vs kernels {tuple(kernels.shape)}')
    if stride not in (1, 2):
        raise ShapeMismatch(f'conv2d: stride must be 1 or 2, got {stride}')
    if x.shape[2] % stride or x.shape[3] % stride:
        raise ShapeMismatch(f'conv2d: spatial size {tuple(x.shape[2:])} not divisible by stride {stride}')
    padding = kernels.shape[-1] // 2 if padding is None else padding
    return F.conv2d(x, kernels, bias, stride=stride, padding=padding)


def bilinear_sample(feature_map, uv):
    """Bilinearly sample feature maps at pixel coordinates, clamped to the border texels

    Args:
        feature_map: (C, H, W) or (B, C, H, W)
        uv: (n, 2) or (B, n, 2) pixel coordinates, texel centers on integers

    Returns:
        (n, C) or (B, n, C)
    """
    batched = feature_map.dim() == 4
    if not batched:
        feature_map = feature_map.unsqueeze(0)
        uv = uv.unsqueeze(0)
    if uv.dim() != 3 or uv.shape[-1] != 2 or uv.shape[0] != feature_map.shape[0]:
        raise ShapeMismatch(f'bilinear_sample: uv {tuple(uv.shape)} vs maps {tuple(feature_map.shape)}')
    height, width = feature_map.shape[-2:]
    u = uv[..., 0].clamp(0, width - 1)
    v = uv[..., 1].clamp(0, height - 1)
    gx = 2.0 * u / (width - 1) - 1.0 if width > 1 else torch.zeros_like(u)
    gy = 2.0 * v / (height - 1) - 1.0 if height > 1 else torch.zeros_like(v)
    grid = torch.stack([gx, gy], dim=-1).unsqueeze(1)
    sampled = F.grid_sample(feature_map, grid, mode='bilinear', padding_mode='border', align_corners=True)
    out = sampled.squeeze(2).transpose(1, 2)
    return out if batched else out.squeeze(0)


def global_avg_pool(feature_maps):
    """Mean over the spatial axes: (..., C, H, W) -> (..., C)"""
    if feature_maps.dim() < 3:
        raise ShapeMismatch(f'global_avg_pool: expected (..., C, H, W), got {tuple(feature_maps.shape)}')
    return feature_maps.mean(dim=(-2, -1))


def binary_cross_entropy(probabilities, labels, clamp=1e-7):
    if probabilities.shape != labels.shape:
        raise ShapeMismatch(f'loss: probabilities {tuple(probabilities.shape)} vs labels {tuple(labels.shape)}')
    p = probabilities.clamp(clamp, 1.0 - clamp)
    labels = labels.to(p.dtype)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Linear(nn.Module):
    """Affine map with weight stored (in_features, out_features)"""

    def __init__(self, in_features, out_features, bias=True, zero_init=False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.empty(out_features)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
            if self.bias is not None:
                nn.init.zeros_(self.bias)
        else:
            self.reset_parameters()

    def reset_parameters(self):
        bound = math.sqrt(1.0 / self.in_features)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels))
        self.reset_parameters()

    def reset_parameters(self):
        fan_in = self.weight.shape[1] * self.weight.shape[2] * self.weight.shape[3]
        bound = math.sqrt(1.0 / fan_in)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class CondNorm(nn.Module):
    """Feature normalization followed by an affine map predicted from a condition

    With cond_dim=None this is plain normalization without affine parameters.
    norm_mode 'batch' normalizes each feature over every row of the batch and
    keeps running statistics for eval; 'sample' normalizes over the points of
    each sample, in train and eval alike.
    """

    def __init__(self, num_features, cond_dim=None, norm_mode='batch'):
        super().__init__()
        self.num_features = num_features
        self.cond_dim = cond_dim
        self.norm_mode = norm_mode
        if norm_mode == 'batch':
            self.bn = nn.BatchNorm1d(num_features, eps=NORM_EPS, momentum=NORM_MOMENTUM, affine=False)
        if cond_dim is not None:
            self.gamma = Linear(cond_dim, num_features)
            self.beta = Linear(cond_dim, num_features)
            nn.init.zeros_(self.gamma.weight)
            nn.init.ones_(self.gamma.bias)
            nn.init.zeros_(self.beta.weight)
            nn.init.zeros_(self.beta.bias)

    def normalize(self, x):
        if x.shape[-1] != self.num_features:
            raise ShapeMismatch(f'cond_norm: {x.shape[-1]} features, layer expects {self.num_features}')
        if self.norm_mode == 'batch':
            return self.bn(x.reshape(-1, self.num_features)).reshape(x.shape)
        rows = x if x.dim() == 3 else x.unsqueeze(0)
        mean = rows.mean(dim=1, keepdim=True)
        var = rows.var(dim=1, unbiased=False, keepdim=True)
        out = (rows - mean) / torch.sqrt(var + NORM_EPS)
        return out if x.dim() == 3 else out.squeeze(0)

    def forward(self, x, condition=None):
        out = self.normalize(x)
        if self.cond_dim is None:
            return out
        if condition is None or condition.shape[-1] != self.cond_dim or condition.shape[:-1] != x.shape[:-1]:
            got = None if condition is None else tuple(condition.shape)
            raise ShapeMismatch(f'cond_norm: condition {got} for input {tuple(x.shape)}')
        return self.gamma(condition) * out + self.beta(condition)


class ResidualBlock(nn.Module):
    """Pre-activation residual MLP block, x + fc_1(relu(n_1(fc_0(relu(n_0(x))))))

    The normalizations n_0 / n_1 are present only when normalize=True; they are
    conditioned when cond_dim is given. fc_1 starts at zero so the block is the
    identity at init.
    """

    def __init__(self, size, cond_dim=None, normalize=False, norm_mode='batch'):
        super().__init__()
        self.size = size
        self.normalize = normalize
        if normalize:
            self.norm_0 = CondNorm(size, cond_dim, norm_mode)
            self.norm_1 = CondNorm(size, cond_dim, norm_mode)
        self.fc_0 = Linear(size, size)
        self.fc_1 = Linear(size, size, zero_init=True)

    def forward(self, x, condition=None):
        if x.shape[-1] != self.size:
            raise ShapeMismatch(f'residual_block: width {x.shape[-1]}, block expects {self.size}')
        h = self.norm_0(x, condition) if self.normalize else x
        h = self.fc_0(F.relu(h))
        h = self.norm_1(h, condition) if self.normalize else h
        return x + self.fc_1(F.relu(h))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def make_optimizer(parameters, lr):
    return torch.optim.Adam(parameters, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer):
    """One bias-corrected Adam update; every parameter must carry a gradient"""
    for group in optimizer.param_groups:
        for p in group['params']:
            if p.requires_grad and p.grad is None:
                raise MissingGrad(f'parameter of shape {tuple(p.shape)} has no gradient')
    optimizer.step()


def optimizer_steps(optimizer):
    """Number of adam_step calls applied so far"""
    for state in optimizer.state.values():
        step = state.get('step', 0)
        return int(step.item() if torch.is_tensor(step) else step)
    return 0


# ---------------------------------------------------------------------------
# Checkpoint records
# ---------------------------------------------------------------------------

def state_records(module):
    """Named (name, shape, values) records for every parameter and buffer"""
    return [{'name': name, 'shape': list(t.shape), 'values': t.detach().cpu().clone()}
            for name, t in module.state_dict().items()]


def write_checkpoint(path, module, header=None, optimizer=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'header': dict(header or {}),
        'records': state_records(module),
    }
    if optimizer is not None:
        payload['optimizer'] = optimizer.state_dict()
    tmp = path.with_suffix(path.suffix + '.tmp')
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointIoError(f'could not write checkpoint {path}: {e}') from e
    logger.debug(f'Wrote checkpoint {path}')


def read_checkpoint(path):
    path = Path(path)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except (OSError, EOFError, RuntimeError, pickle.UnpicklingError, ValueError) as e:
        raise CheckpointIoError(f'could not read checkpoint {path}: {e}') from e
    if not isinstance(payload, dict) or 'records' not in payload:
        raise CheckpointIoError(f'{path} is not a checkpoint file')
    version = payload.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(f'checkpoint format {version}, expected {CHECKPOINT_FORMAT_VERSION}')
    return payload


def load_records(module, records):
    """Copy checkpoint records into a module; parameter names must match exactly"""
    expected = module.state_dict()
    found = {r['name']: r for r in records}
    missing = sorted(set(expected) - set(found))
    unexpected = sorted(set(found) - set(expected))
    if missing or unexpected:
        raise NameMismatch(f'checkpoint names differ: missing={missing[:5]} unexpected={unexpected[:5]}')
    state = {}
    for name, current in expected.items():
        values = found[name]['values']
        if list(values.shape) != list(current.shape):
            raise ShapeMismatch(f'{name}: checkpoint shape {list(values.shape)} vs model {list(current.shape)}')
        state[name] = values.to(current.dtype)
    module.load_state_dict(state)
    return module
