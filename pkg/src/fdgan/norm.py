"""Per-channel feature statistics and the conditional normalization layers.

Three normalizations live here:

* instance norm: standardize each (sample, channel) plane over its spatial
  positions, then apply a learnable per-channel affine.
* adaptive variant (``adain``): the affine comes from the channel statistics
  of a second feature map (the "style" source).
* additive variant (``AdditiveInstanceNorm``): standardize, then add a bias
  computed from a condition vector by a small transform block. There is no
  multiplicative modulation anywhere in this layer, so a misaligned condition
  can only shift features, never rescale them.
"""

import torch
import torch.nn as nn

from .errors import ConfigError, NumericsError

EPS_DEFAULT = 1e-5


def channel_stats(x, eps=EPS_DEFAULT):
    """Mean and deviation of each (sample, channel) plane.

    x: (B, C, H, W). Returns (mu, sigma), both (B, C). sigma uses the
    population variance plus eps under the square root, so it is always
    >= sqrt(eps) and safe to divide by.
    """
    if x.dim() != 4:
        raise ConfigError(f"expected a (B, C, H, W) feature map, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        idx = (~torch.isfinite(x)).nonzero()[0].tolist()
        raise NumericsError(f"non-finite input value at index {tuple(idx)}")
    mu = x.mean(dim=(2, 3))
    var = ((x - mu[:, :, None, None]) ** 2).mean(dim=(2, 3))
    sigma = torch.sqrt(var + eps)
    return mu, sigma


def instance_norm(x, gamma, beta, eps=EPS_DEFAULT):
    """Standardize per (sample, channel), then scale by gamma and shift by beta.

    gamma, beta: per-channel vectors of length C, shared across the batch.
    """
    if gamma.numel() != x.shape[1] or beta.numel() != x.shape[1]:
        raise ConfigError(
            f"affine parameters have {gamma.numel()}/{beta.numel()} channels, "
            f"feature map has {x.shape[1]}"
        )
    mu, sigma = channel_stats(x, eps)
    normed = (x - mu[:, :, None, None]) / sigma[:, :, None, None]
    return gamma.view(1, -1, 1, 1) * normed + beta.view(1, -1, 1, 1)


def adain(x, y, eps=EPS_DEFAULT):
    """Standardize x, then re-scale and re-shift it with y's channel statistics."""
    if x.shape[0] != y.shape[0] or x.shape[1] != y.shape[1]:
        raise ConfigError(
            f"content map {tuple(x.shape)} and style map {tuple(y.shape)} must share "
            "batch size and channel count"
        )
    mu_x, sigma_x = channel_stats(x, eps)
    mu_y, sigma_y = channel_stats(y, eps)
    normed = (x - mu_x[:, :, None, None]) / sigma_x[:, :, None, None]
    return sigma_y[:, :, None, None] * normed + mu_y[:, :, None, None]


def addin(x, cond, transform, eps=EPS_DEFAULT):
    """Standardize x and add a condition-derived per-channel bias.

    The bias broadcasts over spatial positions. Because the normalized map is
    never multiplied by anything, the output is invariant to per-channel
    affine rescalings of x.
    """
    if transform.output_dim != x.shape[1]:
        raise ConfigError(
            f"condition transform emits {transform.output_dim} channels, "
            f"feature map has {x.shape[1]}"
        )
    mu, sigma = channel_stats(x, eps)
    normed = (x - mu[:, :, None, None]) / sigma[:, :, None, None]
    bias = transform(cond)
    return normed + bias[:, :, None, None]


class ConditionTransform(nn.Module):
    """Two fully connected layers mapping a condition vector to a target width.

    The hidden width is the mean of the input and output widths (rounded,
    at least 1).
    """

    def __init__(self, input_dim, output_dim):
        super().__init__()
        if input_dim < 1 or output_dim < 1:
            raise ConfigError(f"bad transform dims ({input_dim} -> {output_dim})")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden_dim = max(1, round((input_dim + output_dim) / 2))
        self.fc1 = nn.Linear(input_dim, self.hidden_dim)
        self.fc2 = nn.Linear(self.hidden_dim, output_dim)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, cond):
        if cond.shape[-1] != self.input_dim:
            raise ConfigError(
                f"condition has width {cond.shape[-1]}, transform expects {self.input_dim}"
            )
        return self.fc2(self.act(self.fc1(cond)))


class InstanceNorm(nn.Module):
    """Instance normalization with learnable per-channel affine output."""

    def __init__(self, num_channels, eps=EPS_DEFAULT):
        super().__init__()
        self.num_channels = num_channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))

    def forward(self, x):
        return instance_norm(x, self.weight, self.bias, self.eps)


class AdditiveInstanceNorm(nn.Module):
    """Bias-only conditional normalization.

    Owns its condition transform, which maps the shared global condition down
    to this site's channel width.
    """

    def __init__(self, cond_dim, num_channels, eps=EPS_DEFAULT):
        super().__init__()
        self.num_channels = num_channels
        self.eps = eps
        self.transform = ConditionTransform(cond_dim, num_channels)

    def forward(self, x, cond):
        return addin(x, cond, self.transform, self.eps)


class AdaptiveInstanceNorm(nn.Module):
    """Conditional normalization with both scale and bias from the condition.

    Used by the adaptive-norm ablation. The transform emits 2C values per
    sample; the scale half is offset by 1 so the layer starts near identity.
    """

    def __init__(self, cond_dim, num_channels, eps=EPS_DEFAULT):
        super().__init__()
        self.num_channels = num_channels
        self.eps = eps
        self.transform = ConditionTransform(cond_dim, 2 * num_channels)

    def forward(self, x, cond):
        if x.shape[1] != self.num_channels:
            raise ConfigError(
                f"feature map has {x.shape[1]} channels, layer built for {self.num_channels}"
            )
        mu, sigma = channel_stats(x, self.eps)
        normed = (x - mu[:, :, None, None]) / sigma[:, :, None, None]
        params = self.transform(cond)
        scale, shift = params.chunk(2, dim=1)
        return (1.0 + scale)[:, :, None, None] * normed + shift[:, :, None, None]


def _flatten_grads(tensors):
    return torch.cat([t.reshape(-1) for t in tensors])


def _finite_difference(objective, tensors, step=1e-5):
    """Central finite differences of a scalar objective over every element."""
    grads = []
    for t in tensors:
        flat = t.detach().reshape(-1)
        g = torch.empty_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = objective().item()
            flat[i] = orig - step
            f_minus = objective().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * step)
        grads.append(g)
    return torch.cat(grads)


GRAD_CHECK_OPS = ("instance_norm", "adain", "addin", "condition_transform")


def grad_check(op_id, seed=0, step=1e-5):
    """Compare analytic gradients against central finite differences.

    Runs in double precision on a small random probe and returns the maximum
    relative error |analytic - numeric| / max(1, |analytic|) over every input
    element and parameter. op_id is one of GRAD_CHECK_OPS.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.float64
    x = torch.randn(2, 4, 6, 6, generator=gen, dtype=dtype)
    weights = torch.randn(2, 4, 6, 6, generator=gen, dtype=dtype)

    if op_id == "instance_norm":
        gamma = torch.randn(4, generator=gen, dtype=dtype)
        beta = torch.randn(4, generator=gen, dtype=dtype)
        leaves = [x, gamma, beta]
        fn = lambda: (instance_norm(x, gamma, beta) * weights).sum()
    elif op_id == "adain":
        y = torch.randn(2, 4, 6, 6, generator=gen, dtype=dtype)
        leaves = [x, y]
        fn = lambda: (adain(x, y) * weights).sum()
    elif op_id == "addin":
        transform = ConditionTransform(3, 4).to(dtype)
        cond = torch.randn(2, 3, generator=gen, dtype=dtype)
        leaves = [x, cond] + list(transform.parameters())
        fn = lambda: (addin(x, cond, transform) * weights).sum()
    elif op_id == "condition_transform":
        transform = ConditionTransform(3, 4).to(dtype)
        cond = torch.randn(2, 3, generator=gen, dtype=dtype)
        w2 = torch.randn(2, 4, generator=gen, dtype=dtype)
        leaves = [cond] + list(transform.parameters())
        fn = lambda: (transform(cond) * w2).sum()
    else:
        raise ConfigError(f"unknown grad-check op {op_id!r}; choose from {GRAD_CHECK_OPS}")

    for t in leaves:
        t.requires_grad_(True)
    loss = fn()
    analytic = _flatten_grads(torch.autograd.grad(loss, leaves))
    with torch.no_grad():
        numeric = _finite_difference(fn, leaves, step)
    rel = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return rel.max().item()
