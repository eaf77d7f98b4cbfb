"""Pre-activation residual classifiers parameterized by normalization strategy.

One architecture, five normalization strategies: plain batch norm, mixture
batch norm (dual statistic banks), instance norm, a normalizer-free variant
(no norm layers, scaled-weight-standardized convolutions, downscaled residual
branches), and a bare unnormalized control.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (DEFAULT_SWS_EPS, DEFAULT_SWS_GAIN, BRANCHES,
                     MixtureBatchNorm2d, RoutingError, SWSConv2d, SWSLinear,
                     mbn_interpolate_logits)

VALID_DEPTHS = (8, 14, 20, 26)


class UnsupportedProbeError(RuntimeError):
    """Requested a running-statistics probe on a model that has none."""


class NormStrategy(str, Enum):
    BN = "bn"
    MBN = "mbn"
    IN = "in"
    NF = "nf"
    NONE = "none"


@dataclass
class ModelConfig:
    """Architecture knobs for :class:`ResidualClassifier`.

    ``depth`` follows the 6n+2 family (8, 14, 20, 26); the three stages use
    widths (width, 2*width, 4*width).  ``residual_scale`` damps the residual
    branch of normalizer-free models only.
    """
    depth: int = 8
    width: int = 16
    num_classes: int = 10
    norm: NormStrategy = NormStrategy.BN
    in_channels: int = 3
    sws_gain: float = DEFAULT_SWS_GAIN
    sws_eps: float = DEFAULT_SWS_EPS
    sws_learnable_gain: bool = False
    bn_momentum: float = 0.1
    residual_scale: float = 0.2
    input_mean: tuple | None = None
    input_std: tuple | None = None

    def __post_init__(self):
        if isinstance(self.norm, str):
            self.norm = NormStrategy(self.norm)
        if self.input_mean is not None:
            self.input_mean = tuple(float(v) for v in self.input_mean)
        if self.input_std is not None:
            self.input_std = tuple(float(v) for v in self.input_std)
        if self.depth not in VALID_DEPTHS:
            raise ValueError(f"depth must be one of {VALID_DEPTHS} (6n+2), got {self.depth}")
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels <= 0:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")
        if self.sws_gain <= 0:
            raise ValueError(f"sws_gain must be positive, got {self.sws_gain}")
        if self.sws_eps <= 0:
            raise ValueError(f"sws_eps must be positive, got {self.sws_eps}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        if self.residual_scale <= 0:
            raise ValueError(f"residual_scale must be positive, got {self.residual_scale}")
        if (self.input_mean is None) != (self.input_std is None):
            raise ValueError("input_mean and input_std must be set together")
        if self.input_mean is not None:
            if len(self.input_mean) != self.in_channels or len(self.input_std) != self.in_channels:
                raise ValueError(
                    f"input_mean/input_std need {self.in_channels} entries, got "
                    f"{len(self.input_mean)}/{len(self.input_std)}")
            if any(s <= 0 for s in self.input_std):
                raise ValueError(f"input_std entries must be positive, got {self.input_std}")


@dataclass(frozen=True)
class Interpolate:
    """Inference routing for mixture-BN models: blend clean and adv statistics.

    ``gamma`` weights the adversarial branch.  ``mix_set`` lists normalization
    site indices whose *features* are interpolated in place; sites outside it
    keep the two paths separate, and the final logits are always interpolated.
    An empty ``mix_set`` is the logit-interpolation variant.
    """
    gamma: float
    mix_set: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        object.__setattr__(self, "mix_set", frozenset(self.mix_set))


def _make_norm(cfg: ModelConfig, channels: int):
    if cfg.norm == NormStrategy.BN:
        return nn.BatchNorm2d(channels, momentum=cfg.bn_momentum)
    if cfg.norm == NormStrategy.MBN:
        return MixtureBatchNorm2d(channels, momentum=cfg.bn_momentum)
    if cfg.norm == NormStrategy.IN:
        return nn.InstanceNorm2d(channels, affine=True)
    return None  # NF / NONE carry no normalization layers


def _make_conv(cfg: ModelConfig, cin, cout, ksize, stride, padding):
    if cfg.norm == NormStrategy.NF:
        return SWSConv2d(cin, cout, ksize, stride=stride, padding=padding,
                         bias=True, gain=cfg.sws_gain, eps=cfg.sws_eps,
                         learnable_gain=cfg.sws_learnable_gain)
    return nn.Conv2d(cin, cout, ksize, stride=stride, padding=padding, bias=False)


class PreActBlock(nn.Module):
    """Pre-activation residual block: norm-relu-conv, norm-relu-conv, + skip."""

    def __init__(self, cfg: ModelConfig, cin, cout, stride):
        super().__init__()
        self.norm1 = _make_norm(cfg, cin)
        self.conv1 = _make_conv(cfg, cin, cout, 3, stride, 1)
        self.norm2 = _make_norm(cfg, cout)
        self.conv2 = _make_conv(cfg, cout, cout, 3, 1, 1)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = _make_conv(cfg, cin, cout, 1, stride, 0)
        self.branch_scale = cfg.residual_scale if cfg.norm == NormStrategy.NF else 1.0

    def forward(self, x):
        h = x if self.norm1 is None else self.norm1(x)
        h = F.relu(h)
        skip = x if self.shortcut is None else self.shortcut(h)
        h = self.conv1(h)
        h = h if self.norm2 is None else self.norm2(h)
        h = self.conv2(F.relu(h))
        return skip + self.branch_scale * h


class ResidualClassifier(nn.Module):
    """Three-stage pre-activation residual image classifier.

    ``forward(x, routing=...)`` — mixture-BN models require routing ('clean',
    'adv', or an :class:`Interpolate`); every other strategy forbids it.
    ``norm_sites`` lists the normalization modules in forward order (empty for
    NF and NONE models).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = (cfg.depth - 2) // 6
        widths = (cfg.width, 2 * cfg.width, 4 * cfg.width)
        if cfg.input_mean is not None:
            # dataset standardization folded into the model so attacks can stay
            # on the raw pixel scale
            self.register_buffer(
                "in_mean", torch.tensor(cfg.input_mean).view(1, -1, 1, 1))
            self.register_buffer(
                "in_std", torch.tensor(cfg.input_std).view(1, -1, 1, 1))
        else:
            self.in_mean = None
            self.in_std = None
        self.stem = _make_conv(cfg, cfg.in_channels, widths[0], 3, 1, 1)
        blocks = []
        cin = widths[0]
        for stage, cout in enumerate(widths):
            for b in range(n):
                stride = 2 if (stage > 0 and b == 0) else 1
                blocks.append(PreActBlock(cfg, cin, cout, stride))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.final_norm = _make_norm(cfg, widths[2])
        if cfg.norm == NormStrategy.NF:
            self.head = SWSLinear(widths[2], cfg.num_classes,
                                  gain=cfg.sws_gain, eps=cfg.sws_eps,
                                  learnable_gain=cfg.sws_learnable_gain)
        else:
            self.head = nn.Linear(widths[2], cfg.num_classes)
        self.norm_sites = []
        for block in self.blocks:
            for site in (block.norm1, block.norm2):
                if site is not None:
                    self.norm_sites.append(site)
        if self.final_norm is not None:
            self.norm_sites.append(self.final_norm)

    def _backbone(self, x):
        if self.in_mean is not None:
            x = (x - self.in_mean) / self.in_std
        h = self.stem(x)
        h = self.blocks(h)
        if self.final_norm is not None:
            h = self.final_norm(h)
        h = F.relu(h)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h)

    def _set_routes(self, route):
        for site in self.norm_sites:
            if isinstance(site, MixtureBatchNorm2d):
                site._route = route

    def _set_pair_routes(self, gamma, mix_set):
        for i, site in enumerate(self.norm_sites):
            site._route = ("pair", gamma, i in mix_set)

    def _clear_routes(self):
        self._set_routes(None)

    def forward(self, x, routing=None):
        if self.cfg.norm != NormStrategy.MBN:
            if routing is not None:
                raise RoutingError(
                    f"routing is only meaningful for mixture-BN models (norm={self.cfg.norm.value})")
            return self._backbone(x)
        if routing is None:
            raise RoutingError(
                "mixture-BN model requires routing: 'clean', 'adv', or Interpolate(...)")
        if isinstance(routing, Interpolate):
            return self._forward_interpolated(x, routing)
        if routing not in BRANCHES:
            raise RoutingError(f"unknown routing {routing!r}")
        self._set_routes(("branch", routing))
        try:
            return self._backbone(x)
        finally:
            self._clear_routes()

    def _forward_interpolated(self, x, routing: Interpolate):
        bad = sorted(i for i in routing.mix_set
                     if not (isinstance(i, int) and 0 <= i < len(self.norm_sites)))
        if bad:
            raise RoutingError(
                f"mix_set indices {bad} out of range for {len(self.norm_sites)} norm sites")
        # Run clean and adv paths as the two halves of one doubled batch; every
        # op outside MBN sites is per-sample, so the halves stay independent.
        paired = torch.cat([x, x], dim=0)
        self._set_pair_routes(routing.gamma, routing.mix_set)
        try:
            logits = self._backbone(paired)
        finally:
            self._clear_routes()
        z_clean, z_adv = logits.chunk(2, dim=0)
        return mbn_interpolate_logits(z_clean, z_adv, routing.gamma)


class RoutedModel(nn.Module):
    """View of a mixture-BN model with a fixed routing, usable as a plain model."""

    def __init__(self, model: ResidualClassifier, routing):
        super().__init__()
        self.model = model
        self.routing = routing

    def forward(self, x):
        return self.model(x, routing=self.routing)


def mbn_interpolate_features(model: ResidualClassifier, x, gamma, mix_set=frozenset()):
    """Mixture-BN inference with statistics interpolation at the given sites."""
    return model(x, routing=Interpolate(gamma, frozenset(mix_set)))


def bn_running_stats(model: ResidualClassifier, layer_index: int):
    """Running (mean, variance) pairs per channel at one normalization site.

    Returns a list of ``(mean, var)`` floats for BN sites, or a dict with
    'clean' and 'adv' lists for mixture-BN sites.  Models without running
    statistics (NF, NONE, IN) raise :class:`UnsupportedProbeError`.
    """
    if not model.norm_sites:
        raise UnsupportedProbeError(
            f"model with norm={model.cfg.norm.value} has no normalization sites to probe")
    if not 0 <= layer_index < len(model.norm_sites):
        raise IndexError(
            f"layer_index {layer_index} out of range for {len(model.norm_sites)} norm sites")
    site = model.norm_sites[layer_index]
    if isinstance(site, MixtureBatchNorm2d):
        return {
            branch: [(m.item(), v.item()) for m, v in zip(*site.bank(branch))]
            for branch in BRANCHES
        }
    if isinstance(site, nn.BatchNorm2d):
        return [(m.item(), v.item())
                for m, v in zip(site.running_mean, site.running_var)]
    raise UnsupportedProbeError(
        f"normalization site {layer_index} ({type(site).__name__}) keeps no running statistics")


def count_norm_sites(cfg: ModelConfig) -> int:
    if cfg.norm in (NormStrategy.NF, NormStrategy.NONE):
        return 0
    n = (cfg.depth - 2) // 6
    return 2 * (3 * n) + 1
