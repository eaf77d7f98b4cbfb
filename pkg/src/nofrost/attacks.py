"""L-infinity attack family built around one projected-ascent engine.

Variants are selected through :class:`AttackConfig`: plain PGD with
cross-entropy or CW-margin loss, targeted PGD, momentum iterative ascent
(l1-normalized gradient accumulation), early-stopped "friendly" PGD, and the
KL inner maximization used by the TRADES objective.  All randomness (init
noise, target draws) comes from one torch.Generator seeded from the config, so
a given (model, batch, config) triple is exactly repeatable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOSS_KINDS = ("cross_entropy", "targeted_cross_entropy", "cw_margin", "kl_vs_reference")
TARGET_RULES = ("none", "fixed", "random_other")

_L1_FLOOR = 1e-12  # keeps the momentum update finite on an exactly-zero gradient


class AttackError(RuntimeError):
    """Attack aborted: non-finite gradients encountered."""


@dataclass
class AttackConfig:
    """Threat-model and optimizer knobs for one attack.

    ``eps`` and ``step_size`` live on the model input scale (divide pixel-scale
    budgets by 255 before building the config).  ``step_size=None`` resolves to
    ``2.5 * eps / steps``.  ``momentum_decay > 0`` switches on momentum
    accumulation; ``early_stop_extra_steps`` only matters for the early-stop
    variant; ``target_rule``/``target_class`` only for targeted attacks.
    """
    eps: float = 8 / 255
    steps: int = 20
    step_size: float | None = None
    random_init: bool = True
    loss_kind: str = "cross_entropy"
    momentum_decay: float = 0.0
    early_stop: bool = False
    early_stop_extra_steps: int = 1
    target_rule: str = "none"
    target_class: int | None = None
    seed: int = 0
    pixel_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ValueError(f"step_size must be positive when steps > 0, got {self.step_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.momentum_decay < 0:
            raise ValueError(f"momentum_decay must be >= 0, got {self.momentum_decay}")
        if self.early_stop_extra_steps < 0:
            raise ValueError(f"early_stop_extra_steps must be >= 0, got {self.early_stop_extra_steps}")
        if self.early_stop and self.loss_kind not in ("cross_entropy", "cw_margin"):
            raise ValueError(f"early_stop requires an untargeted loss, got {self.loss_kind!r}")
        if self.target_rule not in TARGET_RULES:
            raise ValueError(f"target_rule must be one of {TARGET_RULES}, got {self.target_rule!r}")
        if self.loss_kind == "targeted_cross_entropy" and self.target_rule == "none":
            raise ValueError("targeted_cross_entropy requires target_rule 'fixed' or 'random_other'")
        if self.target_rule == "fixed" and self.target_class is None:
            raise ValueError("target_rule 'fixed' requires target_class")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise ValueError(f"pixel_range must be increasing, got {self.pixel_range}")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / self.steps if self.steps > 0 else 0.0


@dataclass
class AdversarialBatch:
    """Attack output: examples plus per-sample bookkeeping."""
    x_star: torch.Tensor
    iterations_used: torch.Tensor  # long [B]
    success: torch.Tensor          # bool [B]


def project_linf(x_adv: torch.Tensor, x_ref: torch.Tensor, eps: float,
                 pixel_range=(0.0, 1.0)) -> torch.Tensor:
    """Project onto the eps-ball around ``x_ref`` intersected with the pixel box."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if x_adv.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x_ref.shape)}")
    out = torch.clamp(x_adv, x_ref - eps, x_ref + eps)
    return torch.clamp(out, pixel_range[0], pixel_range[1])


def cw_margin_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample margin ``max_{i != y} z_i - z_y`` (positive iff misclassified)."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be [B, K>=2], got {tuple(logits.shape)}")
    if y.shape != logits.shape[:1]:
        raise ValueError(f"labels shape {tuple(y.shape)} does not match batch {logits.shape[0]}")
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise ValueError("labels out of range for logits")
    true_logit = logits.gather(1, y[:, None]).squeeze(1)
    masked = logits.scatter(1, y[:, None], float("-inf"))
    return masked.max(dim=1).values - true_logit


def select_targets(y: torch.Tensor, num_classes: int, cfg: AttackConfig,
                   generator: torch.Generator) -> torch.Tensor:
    """Draw attack targets per the config's target rule (never the true label)."""
    if cfg.target_rule == "fixed":
        if not 0 <= cfg.target_class < num_classes:
            raise ValueError(f"target_class {cfg.target_class} out of range")
        return torch.full_like(y, cfg.target_class)
    if cfg.target_rule == "random_other":
        # uniform over the K-1 non-true classes: draw an offset in [1, K-1]
        offset = torch.randint(1, num_classes, y.shape, generator=generator)
        return (y + offset) % num_classes
    raise ValueError(f"target_rule {cfg.target_rule!r} does not define targets")


def _ascent_loss(logits, kind, y=None, target=None, log_p_ref=None):
    """Sum over the batch of the quantity the attack ascends."""
    if kind == "cross_entropy":
        return F.cross_entropy(logits, y, reduction="sum")
    if kind == "cw_margin":
        return cw_margin_loss(logits, y).sum()
    if kind == "targeted_cross_entropy":
        return -F.cross_entropy(logits, target, reduction="sum")
    if kind == "kl_vs_reference":
        # KL(p_ref || p(logits)); the entropy of p_ref is constant in x, so
        # ascending the cross term suffices and keeps gradients identical.
        return -(log_p_ref.exp() * F.log_softmax(logits, dim=1)).sum()
    raise ValueError(f"unknown loss kind {kind!r}")


def _predict(model, x):
    with torch.no_grad():
        return model(x).argmax(dim=1)


def _pgd_engine(model, x, cfg: AttackConfig, *, y=None, target=None,
                log_p_ref=None, early_stop=False, loss_kind=None) -> AdversarialBatch:
    loss_kind = cfg.loss_kind if loss_kind is None else loss_kind
    x = x.detach()
    gen = torch.Generator(device=x.device).manual_seed(cfg.seed)
    alpha = cfg.resolved_step_size
    if cfg.random_init and cfg.eps > 0:
        noise = (torch.rand(x.shape, generator=gen, device=x.device, dtype=x.dtype) * 2 - 1) * cfg.eps
        x_adv = project_linf(x + noise, x, cfg.eps, cfg.pixel_range)
    else:
        x_adv = project_linf(x, x, cfg.eps, cfg.pixel_range)

    batch = x.shape[0]
    view = (batch,) + (1,) * (x.ndim - 1)
    momentum = torch.zeros_like(x)
    iterations_used = torch.zeros(batch, dtype=torch.long, device=x.device)
    stopped = torch.zeros(batch, dtype=torch.bool, device=x.device)
    triggered = torch.zeros(batch, dtype=torch.bool, device=x.device)
    extra_left = torch.zeros(batch, dtype=torch.long, device=x.device)
    tau = cfg.early_stop_extra_steps

    if early_stop:
        mis = _predict(model, x_adv) != y
        triggered |= mis
        extra_left[mis] = tau
        stopped = triggered & (extra_left <= 0)

    for _ in range(cfg.steps):
        active = ~stopped
        if not bool(active.any()):
            break
        x_in = x_adv.clone().requires_grad_(True)
        loss = _ascent_loss(model(x_in), loss_kind, y=y, target=target,
                            log_p_ref=log_p_ref)
        grad, = torch.autograd.grad(loss, x_in)
        if not torch.isfinite(grad).all():
            raise AttackError("non-finite attack gradient; aborting")
        if cfg.momentum_decay > 0:
            l1 = grad.abs().flatten(1).sum(dim=1).clamp_min(_L1_FLOOR).view(view)
            momentum = cfg.momentum_decay * momentum + grad / l1
            direction = momentum.sign()
        else:
            direction = grad.sign()
        proposal = project_linf(x_adv + alpha * direction, x, cfg.eps, cfg.pixel_range)
        x_adv = torch.where(active.view(view), proposal, x_adv)
        iterations_used += active.long()
        if early_stop:
            consumed = active & triggered
            extra_left[consumed] -= 1
            newly = active & ~triggered & (_predict(model, x_adv) != y)
            triggered |= newly
            extra_left[newly] = tau
            stopped = triggered & (extra_left <= 0)

    x_adv = x_adv.detach()
    preds = _predict(model, x_adv)
    if target is not None:
        success = preds == target
    elif log_p_ref is not None:
        success = preds != log_p_ref.argmax(dim=1)
    else:
        success = preds != y
    return AdversarialBatch(x_adv, iterations_used, success)


def pgd(model, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """Untargeted projected ascent; loss is cross-entropy or CW margin."""
    if cfg.loss_kind not in ("cross_entropy", "cw_margin"):
        raise ValueError(f"pgd expects an untargeted loss, got {cfg.loss_kind!r}")
    return _pgd_engine(model, x, cfg, y=y)


def targeted_pgd(model, x, target, cfg: AttackConfig) -> AdversarialBatch:
    """Targeted PGD: descends cross-entropy toward ``target`` (tensor of labels)."""
    target = torch.as_tensor(target, dtype=torch.long, device=x.device)
    if target.shape != x.shape[:1]:
        raise ValueError(f"target shape {tuple(target.shape)} must be per-sample")
    return _pgd_engine(model, x, cfg, target=target, loss_kind="targeted_cross_entropy")


def fat_early_stop_pgd(model, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """Friendly PGD: stop each sample ``early_stop_extra_steps`` after it first flips.

    A sample misclassified at step k* runs min(k* + extra, steps) iterations;
    samples never misclassified run the full budget and match plain ``pgd``
    bit-for-bit under the same seed.
    """
    if cfg.loss_kind not in ("cross_entropy", "cw_margin"):
        raise ValueError(f"early-stop pgd expects an untargeted loss, got {cfg.loss_kind!r}")
    return _pgd_engine(model, x, cfg, y=y, early_stop=True)


def trades_inner_max(model, x, cfg: AttackConfig) -> AdversarialBatch:
    """Inner maximization of KL(p(x) || p(x')) with p(x) held fixed.

    ``success`` reports disagreement with the reference prediction at x.
    """
    if cfg.loss_kind != "kl_vs_reference":
        raise ValueError(f"trades inner max requires loss_kind='kl_vs_reference', got {cfg.loss_kind!r}")
    with torch.no_grad():
        log_p_ref = F.log_softmax(model(x), dim=1)
    return _pgd_engine(model, x, cfg, log_p_ref=log_p_ref)


def trades_fat_inner_max(model, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """KL inner maximization with the friendly early-stop rule on label flips."""
    if cfg.loss_kind != "kl_vs_reference":
        raise ValueError(f"trades inner max requires loss_kind='kl_vs_reference', got {cfg.loss_kind!r}")
    with torch.no_grad():
        log_p_ref = F.log_softmax(model(x), dim=1)
    return _pgd_engine(model, x, cfg, y=y, log_p_ref=log_p_ref, early_stop=True)
