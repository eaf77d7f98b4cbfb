"""Seeded augmentations: perturbed-network distortions, mild geometric/photometric
transforms, and a severity-graded corruption suite for robustness evaluation.

All augmentations are pure functions of (input, seed, params); nothing touches
global RNG state, so training runs stay reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

_LUMA = (0.299, 0.587, 0.114)


class AugmentKind(str, Enum):
    DEEPAUGMENT_LITE = "deepaugment_lite"
    TDA = "tda"
    IDENTITY = "identity"


def _as_batch(x):
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {tuple(x.shape)}")


class DeepAugmentLite(nn.Module):
    """Small frozen encoder-decoder whose weights are noised per call.

    The base network is residual with a zero-initialized output projection, so
    with zero noise it is exactly the identity map.  Each call perturbs every
    weight with multiplicative N(1, noise_mult^2) and additive N(0, noise_add^2)
    factors drawn from the call's seed, producing a diverse but seeded family
    of image-to-image distortions.  Spatial dims must be even (one stride-2
    stage).
    """

    def __init__(self, in_channels=3, hidden=16, noise_mult=0.2, noise_add=0.05,
                 residual_scale=0.2, init_seed=0):
        super().__init__()
        self.noise_mult = noise_mult
        self.noise_add = noise_add
        self.residual_scale = residual_scale
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.enc1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
            self.enc2 = nn.Conv2d(hidden, hidden, 3, stride=2, padding=1)
            self.dec = nn.ConvTranspose2d(hidden, hidden, 3, stride=2,
                                          padding=1, output_padding=1)
            self.head = nn.Conv2d(hidden, in_channels, 3, padding=1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def _net(self, x, params):
        h = F.relu(F.conv2d(x, params["enc1.weight"], params["enc1.bias"], padding=1))
        h = F.relu(F.conv2d(h, params["enc2.weight"], params["enc2.bias"],
                            stride=2, padding=1))
        h = F.relu(F.conv_transpose2d(h, params["dec.weight"], params["dec.bias"],
                                      stride=2, padding=1, output_padding=1))
        return F.conv2d(h, params["head.weight"], params["head.bias"], padding=1)

    def forward(self, x, seed: int):
        xb, single = _as_batch(x)
        if xb.shape[-1] % 2 or xb.shape[-2] % 2:
            raise ValueError(f"spatial dims must be even, got {tuple(xb.shape[-2:])}")
        gen = torch.Generator(device=xb.device).manual_seed(int(seed))
        params = {}
        for name, p in self.named_parameters():
            mult = 1.0 + self.noise_mult * torch.randn(p.shape, generator=gen, device=p.device)
            add = self.noise_add * torch.randn(p.shape, generator=gen, device=p.device)
            params[name] = p * mult + add
        out = torch.clamp(xb + self.residual_scale * self._net(xb, params), 0.0, 1.0)
        return out.squeeze(0) if single else out


@dataclass(frozen=True)
class TdaParams:
    """Mild crop/flip/color-jitter; defaults keep perturbations gentle.

    ``crop_scale`` bounds the area fraction of a random square crop (resized
    back bilinearly); ``jitter`` bounds brightness/contrast/saturation factors.
    Setting crop_scale=(1,1), flip_prob=0, jitter=(1,1) is the exact identity.
    """
    crop_scale: tuple = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter: tuple = (0.6, 1.4)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        jlo, jhi = self.jitter
        if not 0 < jlo <= jhi:
            raise ValueError(f"jitter must satisfy 0 < lo <= hi, got {self.jitter}")


def _uniform(gen, lo, hi):
    return (lo + (hi - lo) * torch.rand((), generator=gen)).item()


def _grayscale(img):
    if img.shape[0] != 3:
        return img.mean(dim=0, keepdim=True)
    w = torch.tensor(_LUMA, dtype=img.dtype, device=img.device)
    return (img * w[:, None, None]).sum(dim=0, keepdim=True)


def tda(x, seed: int, params: TdaParams = TdaParams()):
    """Traditional augmentation: random crop-and-resize, horizontal flip, jitter.

    Operates on one [C,H,W] image (or [B,C,H,W] applying the same draws to the
    whole batch).  All draws come from ``seed`` in a fixed order; factors that
    come out exactly neutral are skipped, so the identity configuration returns
    the input bit-for-bit.
    """
    xb, single = _as_batch(x)
    _, _, H, W = xb.shape
    gen = torch.Generator(device=xb.device).manual_seed(int(seed))
    scale = _uniform(gen, *params.crop_scale)
    side_h = max(1, round(H * math.sqrt(scale)))
    side_w = max(1, round(W * math.sqrt(scale)))
    top = int(torch.randint(0, H - side_h + 1, (), generator=gen))
    left = int(torch.randint(0, W - side_w + 1, (), generator=gen))
    do_flip = _uniform(gen, 0.0, 1.0) < params.flip_prob
    brightness = _uniform(gen, *params.jitter)
    contrast = _uniform(gen, *params.jitter)
    saturation = _uniform(gen, *params.jitter)

    out = xb
    if side_h != H or side_w != W:
        crop = out[:, :, top:top + side_h, left:left + side_w]
        out = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)
    if do_flip:
        out = torch.flip(out, dims=[-1])
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = torch.stack([_grayscale(img).mean() for img in out])
        out = (out - mean[:, None, None, None]) * contrast + mean[:, None, None, None]
    if saturation != 1.0 and out.shape[1] == 3:
        gray = torch.stack([_grayscale(img) for img in out])
        out = gray + (out - gray) * saturation
    if out is not xb:
        out = torch.clamp(out, 0.0, 1.0)
    return out.squeeze(0) if single else out


def identity_augmenter(x, rng=None):
    """Augmenter that returns its input unchanged (for ablations and tests)."""
    return x


class AugmentSampler:
    """Per-sample coin flip between the perturbed-network and traditional pipelines.

    Calling the sampler on a batch draws, per sample, a branch (p = 0.5 each)
    and a fresh seed from ``rng``, then applies the drawn augmentation.
    """

    def __init__(self, deepaug: DeepAugmentLite | None = None,
                 tda_params: TdaParams | None = None, in_channels=3):
        self.deepaug = deepaug if deepaug is not None else DeepAugmentLite(in_channels=in_channels)
        self.tda_params = tda_params if tda_params is not None else TdaParams()

    def __call__(self, x, rng: torch.Generator):
        xb, single = _as_batch(x)
        n = xb.shape[0]
        use_tda = torch.rand(n, generator=rng) < 0.5
        seeds = torch.randint(0, 2**31 - 1, (n,), generator=rng)
        out = []
        for i in range(n):
            if use_tda[i]:
                out.append(tda(xb[i], int(seeds[i]), self.tda_params))
            else:
                out.append(self.deepaug(xb[i], int(seeds[i])))
        stacked = torch.stack(out)
        return stacked.squeeze(0) if single else stacked


# ---------------------------------------------------------------------------
# corruption suite

CORRUPTION_KINDS = ("gaussian_noise", "motion_blur_proxy", "contrast", "pixelate")

# severity 1..5 parameter tables (index severity-1)
GAUSSIAN_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
MOTION_BLUR_LENGTH = (3, 5, 7, 9, 11)
CONTRAST_FACTOR = (0.60, 0.45, 0.30, 0.20, 0.10)
PIXELATE_SCALE = (0.60, 0.50, 0.40, 0.30, 0.25)

_SEVERITY_TABLES = {
    "gaussian_noise": GAUSSIAN_NOISE_SIGMA,
    "motion_blur_proxy": MOTION_BLUR_LENGTH,
    "contrast": CONTRAST_FACTOR,
    "pixelate": PIXELATE_SCALE,
}


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption: kind, severity 1-5, optional raw parameter override."""
    kind: str
    severity: int = 3
    param_override: float | None = None

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in 1..5, got {self.severity}")

    @property
    def param(self):
        if self.param_override is not None:
            return self.param_override
        return _SEVERITY_TABLES[self.kind][self.severity - 1]

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.severity}"


def _motion_blur(xb, length):
    length = int(length)
    if length % 2 == 0:
        length += 1
    c = xb.shape[1]
    kernel = torch.full((c, 1, 1, length), 1.0 / length, dtype=xb.dtype, device=xb.device)
    pad = length // 2
    padded = F.pad(xb, (pad, pad, 0, 0), mode="reflect")
    return F.conv2d(padded, kernel, groups=c)


def _pixelate(xb, scale):
    H, W = xb.shape[-2:]
    small = (max(1, round(H * scale)), max(1, round(W * scale)))
    down = F.interpolate(xb, size=small, mode="area")
    return F.interpolate(down, size=(H, W), mode="nearest")


def corrupt(x, spec: CorruptionSpec, seed: int = 0):
    """Apply one corruption; only gaussian noise consumes the seed."""
    xb, single = _as_batch(x)
    if spec.kind == "gaussian_noise":
        gen = torch.Generator(device=xb.device).manual_seed(int(seed))
        noise = spec.param * torch.randn(xb.shape, generator=gen, device=xb.device, dtype=xb.dtype)
        out = xb + noise
    elif spec.kind == "motion_blur_proxy":
        out = _motion_blur(xb, spec.param)
    elif spec.kind == "contrast":
        mean = torch.stack([_grayscale(img).mean() for img in xb])
        out = (xb - mean[:, None, None, None]) * spec.param + mean[:, None, None, None]
    else:  # pixelate
        out = _pixelate(xb, spec.param)
    out = torch.clamp(out, 0.0, 1.0)
    return out.squeeze(0) if single else out


def default_corruption_suite(severities=(1, 3, 5)):
    return [CorruptionSpec(kind, s) for kind in CORRUPTION_KINDS for s in severities]
