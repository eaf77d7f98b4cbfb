"""Normalization machinery: scaled weight standardization and mixture batch norm.

Two ingredients let a residual classifier train without (or with doubled)
batch normalization:

* scaled weight standardization re-parameterizes every conv/linear weight so
  each output unit has zero-mean, variance-controlled fan-in;
* mixture batch norm keeps two independent running-statistic banks (one fed by
  clean batches, one by adversarial batches) behind a shared affine transform.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_SWS_GAIN = math.sqrt(2.0)
DEFAULT_SWS_EPS = 1e-5

BRANCHES = ("clean", "adv")


class ShapeError(ValueError):
    """Tensor shape violates a layer contract."""


class RoutingError(ValueError):
    """A mixture-BN model was used without (or with invalid) branch routing."""


def scaled_weight_standardize(weight: torch.Tensor, gain: float = DEFAULT_SWS_GAIN,
                              eps: float = DEFAULT_SWS_EPS) -> torch.Tensor:
    """Standardize each output unit of ``weight`` to mean 0 and std ``gain / sqrt(fan_in)``.

    ``weight`` is viewed as ``(out_units, fan_in)`` by flattening all trailing
    dims; per-row std uses the population variance, stabilized as
    ``sqrt(var + eps)``.  Differentiable, so it can sit inside a forward pass.
    """
    if gain <= 0:
        raise ValueError(f"gain must be positive, got {gain}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if weight.ndim < 2:
        raise ShapeError(f"weight must have >= 2 dims (out_units, fan_in...), got shape {tuple(weight.shape)}")
    if weight.shape[0] == 0 or weight[0].numel() == 0:
        raise ShapeError(f"weight must have nonempty rows, got shape {tuple(weight.shape)}")
    rows = weight.reshape(weight.shape[0], -1)
    fan_in = rows.shape[1]
    mean = rows.mean(dim=1, keepdim=True)
    var = rows.var(dim=1, unbiased=False, keepdim=True)
    scale = torch.rsqrt(var + eps) * (gain / math.sqrt(fan_in))
    return ((rows - mean) * scale).reshape(weight.shape)


class SWSConv2d(nn.Conv2d):
    """Conv2d whose weight is scaled-weight-standardized on every forward.

    ``learnable_gain=True`` replaces the fixed scalar gain with a per-output-
    channel parameter initialized to ``gain`` (the free scale batch norm's
    affine weight would otherwise provide); 1-d so weight decay skips it.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, gain=DEFAULT_SWS_GAIN, eps=DEFAULT_SWS_EPS,
                 learnable_gain=False):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride,
                         padding=padding, bias=bias)
        self.gain = gain
        self.sws_eps = eps
        self.gain_param = (nn.Parameter(torch.full((out_channels,), float(gain)))
                           if learnable_gain else None)

    def standardized_weight(self):
        if self.gain_param is None:
            return scaled_weight_standardize(self.weight, self.gain, self.sws_eps)
        w = scaled_weight_standardize(self.weight, 1.0, self.sws_eps)
        return w * self.gain_param.view(-1, 1, 1, 1)

    def forward(self, x):
        return F.conv2d(x, self.standardized_weight(), self.bias, self.stride,
                        self.padding, self.dilation, self.groups)


class SWSLinear(nn.Linear):
    """Linear layer with scaled weight standardization applied on every forward."""

    def __init__(self, in_features, out_features, bias=True,
                 gain=DEFAULT_SWS_GAIN, eps=DEFAULT_SWS_EPS, learnable_gain=False):
        super().__init__(in_features, out_features, bias=bias)
        self.gain = gain
        self.sws_eps = eps
        self.gain_param = (nn.Parameter(torch.full((out_features,), float(gain)))
                           if learnable_gain else None)

    def standardized_weight(self):
        if self.gain_param is None:
            return scaled_weight_standardize(self.weight, self.gain, self.sws_eps)
        return scaled_weight_standardize(self.weight, 1.0, self.sws_eps) * \
            self.gain_param.view(-1, 1)

    def forward(self, x):
        return F.linear(x, self.standardized_weight(), self.bias)


class MixtureBatchNorm2d(nn.Module):
    """Batch norm with two running-statistic banks (clean / adv) and a shared affine.

    In training mode each forward normalizes with current batch statistics and
    updates only the routed branch's running bank (EMA with ``momentum``).  In
    eval mode the routed branch's running statistics are used.  The owning
    model routes each forward by setting ``_route``; using the layer without a
    route is an error, because "which statistics?" would be ambiguous.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("clean_mean", torch.zeros(num_features))
        self.register_buffer("clean_var", torch.ones(num_features))
        self.register_buffer("adv_mean", torch.zeros(num_features))
        self.register_buffer("adv_var", torch.ones(num_features))
        self._route = None

    def bank(self, branch):
        if branch == "clean":
            return self.clean_mean, self.clean_var
        if branch == "adv":
            return self.adv_mean, self.adv_var
        raise RoutingError(f"unknown branch {branch!r}, expected one of {BRANCHES}")

    def normalize(self, x, branch, mode):
        """Normalize ``x`` through one branch; ``mode`` is 'train' or 'eval'.

        Train mode uses batch statistics and EMA-updates the branch's running
        bank (running var stores the unbiased batch variance, matching the
        plain BatchNorm convention).  Eval mode reads the running bank.
        """
        if x.ndim != 4 or x.shape[1] != self.num_features:
            raise ShapeError(
                f"expected NCHW input with C={self.num_features}, got shape {tuple(x.shape)}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        running_mean, running_var = self.bank(branch)
        if mode == "train":
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                n = x.numel() // x.shape[1]
                unbiased = var * (n / (n - 1)) if n > 1 else var
                m = self.momentum
                running_mean.mul_(1.0 - m).add_(mean.detach(), alpha=m)
                running_var.mul_(1.0 - m).add_(unbiased.detach(), alpha=m)
        else:
            mean, var = running_mean, running_var
        inv = torch.rsqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        return xhat * self.weight[None, :, None, None] + self.bias[None, :, None, None]

    def forward(self, x):
        route = self._route
        if route is None:
            raise RoutingError(
                "mixture-BN layer invoked without routing; forward the model with "
                "routing='clean', routing='adv', or an Interpolate routing")
        if route[0] == "branch":
            return self.normalize(x, route[1], "train" if self.training else "eval")
        # paired route: first half of the batch is the clean path, second half
        # the adversarial path; both are normalized in eval mode and, at mixed
        # sites, collapsed onto the interpolated feature.
        _, gamma, mixed = route
        if x.shape[0] % 2 != 0:
            raise ShapeError("paired routing requires an even batch (clean half; adv half)")
        x_clean, x_adv = x.chunk(2, dim=0)
        out_clean = self.normalize(x_clean, "clean", "eval")
        out_adv = self.normalize(x_adv, "adv", "eval")
        if mixed:
            blended = (1.0 - gamma) * out_clean + gamma * out_adv
            return torch.cat([blended, blended], dim=0)
        return torch.cat([out_clean, out_adv], dim=0)


def mbn_interpolate_logits(z_clean: torch.Tensor, z_adv: torch.Tensor, gamma: float) -> torch.Tensor:
    """Convex combination ``(1 - gamma) * z_clean + gamma * z_adv`` of two logit tensors."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if z_clean.shape != z_adv.shape:
        raise ShapeError(
            f"logit shapes differ: {tuple(z_clean.shape)} vs {tuple(z_adv.shape)}")
    return (1.0 - gamma) * z_clean + gamma * z_adv
