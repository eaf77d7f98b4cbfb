"""Training objectives and the desk-scale training loop.

Methods map onto three loss families:

* weighted adversarial training ``(1-lam)*CE(x) + lam*CE(x*)`` — ST (lam=0),
  SAT (lam=cfg), PGDAT (lam=1), FAT (lam=1 with early-stopped attack),
  NOFROST (SAT on a normalizer-free model), MBNAT (clean term through the
  clean statistics bank, adversarial term through the adv bank);
* TRADES ``CE(x) + beta * KL(p(x) || p(x*))``, optionally with the friendly
  early-stop inner max;
* the three-term augmented loss ``(CE(x) + CE(x_hat) + CE(x*)) / 3`` —
  NOFROST_STAR on a normalizer-free model, COMBINE on a batch-norm model.

Adversarial examples are always generated in eval-style forwards (running
statistics for BN; NF models are mode-independent), with per-step attack seeds
derived from the training seed.
"""

from __future__ import annotations

import contextlib
import csv
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import torch
import torch.nn.functional as F

from .attacks import (AttackConfig, fat_early_stop_pgd, pgd, trades_fat_inner_max,
                      trades_inner_max)
from .nfcore.checkpoint import (load_checkpoint, load_trainer_state,
                                save_checkpoint, save_trainer_state)
from .nfcore.models import (ModelConfig, NormStrategy, ResidualClassifier,
                            RoutedModel)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "clean_acc", "pgd_acc", "wall_time")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; the last good checkpoint (if any) is retained."""


class MethodKind(str, Enum):
    ST = "st"
    SAT = "sat"
    PGDAT = "pgdat"
    TRADES = "trades"
    FAT = "fat"
    TRADES_FAT = "trades_fat"
    NOFROST = "nofrost"
    NOFROST_STAR = "nofrost_star"
    COMBINE = "combine"
    MBNAT = "mbnat"


_NF_METHODS = (MethodKind.NOFROST, MethodKind.NOFROST_STAR)
_AUGMENTED_METHODS = (MethodKind.NOFROST_STAR, MethodKind.COMBINE)


@dataclass
class TrainConfig:
    """Optimization and objective knobs for one training run."""
    method: MethodKind = MethodKind.SAT
    lam: float = 0.5              # adversarial weight for SAT / NOFROST / MBNAT
    trades_beta: float = 1.0
    epochs: int = 10
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    agc_lambda: float | None = None   # adaptive gradient clipping, off by default
    agc_eps: float = 1e-3
    eps_warmup_epochs: int = 0        # ramp attack eps 0 -> full over first k epochs
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=10))
    eval_attack: AttackConfig | None = None  # None -> 20-step version of `attack`
    eval_samples: int | None = None          # cap on per-epoch eval set size
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = MethodKind(self.method)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.trades_beta < 0:
            raise ValueError(f"trades_beta must be >= 0, got {self.trades_beta}")
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.agc_lambda is not None and self.agc_lambda <= 0:
            raise ValueError(f"agc_lambda must be positive when set, got {self.agc_lambda}")
        if self.agc_eps <= 0:
            raise ValueError(f"agc_eps must be positive, got {self.agc_eps}")
        if self.eps_warmup_epochs < 0:
            raise ValueError(
                f"eps_warmup_epochs must be >= 0, got {self.eps_warmup_epochs}")

    def resolved_eval_attack(self) -> AttackConfig:
        if self.eval_attack is not None:
            return self.eval_attack
        return replace(self.attack, steps=20, step_size=None, seed=self.attack.seed + 9999)


def validate_method_model(method: MethodKind, norm: NormStrategy) -> None:
    """Reject method/normalization pairs that contradict each other."""
    if method in _NF_METHODS and norm != NormStrategy.NF:
        raise ValueError(f"method {method.value} requires a normalizer-free model, got norm={norm.value}")
    if method == MethodKind.MBNAT and norm != NormStrategy.MBN:
        raise ValueError(f"method mbnat requires a mixture-BN model, got norm={norm.value}")
    if norm == NormStrategy.MBN and method != MethodKind.MBNAT:
        raise ValueError(f"mixture-BN models train with method mbnat, got {method.value}")
    if method == MethodKind.COMBINE and norm != NormStrategy.BN:
        raise ValueError(f"method combine targets batch-norm models, got norm={norm.value}")


def method_lambda(cfg: TrainConfig) -> float:
    """Adversarial weight implied by the method (fixed for ST/PGDAT/FAT)."""
    if cfg.method == MethodKind.ST:
        return 0.0
    if cfg.method in (MethodKind.PGDAT, MethodKind.FAT):
        return 1.0
    return cfg.lam


def _is_mbn(model) -> bool:
    return getattr(getattr(model, "cfg", None), "norm", None) == NormStrategy.MBN


@contextlib.contextmanager
def _eval_mode(model):
    was_training = model.training
    model.eval()
    try:
        yield
    finally:
        model.train(was_training)


def _clean_view(model):
    return RoutedModel(model, "clean") if _is_mbn(model) else model


def _adv_view(model):
    return RoutedModel(model, "adv") if _is_mbn(model) else model


def at_loss(model, x, y, lam, attack_cfg: AttackConfig, attack_fn=pgd):
    """Weighted adversarial training loss ``(1-lam)*CE(x) + lam*CE(x*)``.

    With ``lam == 0`` no attack is executed; with ``lam == 1`` the clean term
    is skipped.  For ``0 < lam < 1`` the clean and adversarial halves run as
    one concatenated forward, so any batch-coupled normalization computes its
    statistics over the clean/adversarial mixture (per-sample architectures
    are unaffected).  Mixture-BN models instead route the clean term through
    the clean bank and both attack generation and the adversarial term
    through the adv bank.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return F.cross_entropy(_clean_view(model)(x), y)
    with _eval_mode(model):
        adv = attack_fn(_adv_view(model), x, y, attack_cfg)
    if lam == 1.0:
        return F.cross_entropy(_adv_view(model)(adv.x_star), y)
    if _is_mbn(model):
        clean_ce = F.cross_entropy(_clean_view(model)(x), y)
        adv_ce = F.cross_entropy(_adv_view(model)(adv.x_star), y)
        return (1.0 - lam) * clean_ce + lam * adv_ce
    logits = model(torch.cat([x, adv.x_star], dim=0))
    z_clean, z_adv = logits.split(x.shape[0], dim=0)
    return ((1.0 - lam) * F.cross_entropy(z_clean, y)
            + lam * F.cross_entropy(z_adv, y))


def trades_loss(model, x, y, beta, attack_cfg: AttackConfig, early_stop=False):
    """TRADES objective ``CE(p(x), y) + beta * KL(p(x) || p(x*))``.

    ``beta == 0`` skips the inner maximization entirely.  ``early_stop``
    switches the inner max to the friendly variant that halts shortly after
    each sample's prediction first flips.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    logits_clean = model(x)
    loss = F.cross_entropy(logits_clean, y)
    if beta == 0:
        return loss
    inner_cfg = replace(attack_cfg, loss_kind="kl_vs_reference")
    with _eval_mode(model):
        if early_stop:
            adv = trades_fat_inner_max(model, x, y, inner_cfg)
        else:
            adv = trades_inner_max(model, x, inner_cfg)
    kl = F.kl_div(F.log_softmax(model(adv.x_star), dim=1),
                  F.softmax(logits_clean, dim=1), reduction="batchmean")
    return loss + beta * kl


def nofrost_star_loss(model, x, y, augmenter, attack_cfg: AttackConfig, rng=None):
    """Three-term loss ``(CE(x) + CE(x_hat) + CE(x*)) / 3``.

    ``x_hat`` comes from the augmenter (a callable ``(x, rng) -> x_hat``);
    ``x*`` from PGD under ``attack_cfg``.  With eps = 0 the attack is skipped
    and ``x* = x``.  The three sources run as one concatenated forward so any
    batch-coupled normalization sees their mixture.
    """
    if augmenter is None:
        raise ValueError("nofrost_star loss requires an augmenter")
    if rng is None:
        rng = torch.Generator().manual_seed(attack_cfg.seed + 7919)
    x_hat = augmenter(x, rng)
    if attack_cfg.eps > 0:
        with _eval_mode(model):
            x_star = pgd(model, x, y, attack_cfg).x_star
    else:
        x_star = x
    logits = model(torch.cat([x, x_hat, x_star], dim=0))
    z, z_hat, z_star = logits.split(x.shape[0], dim=0)
    return (F.cross_entropy(z, y) + F.cross_entropy(z_hat, y)
            + F.cross_entropy(z_star, y)) / 3.0


def agc_clip(grad: torch.Tensor, weight: torch.Tensor, agc_lambda: float,
             agc_eps: float = 1e-3) -> torch.Tensor:
    """Adaptive gradient clipping per output unit.

    Each row (first dim) of ``grad`` is rescaled by
    ``min(1, agc_lambda * max(||w||, agc_eps) / ||g||)``; zero gradients pass
    through unchanged.
    """
    if grad.shape != weight.shape:
        raise ValueError(f"grad/weight shape mismatch: {tuple(grad.shape)} vs {tuple(weight.shape)}")
    if agc_lambda <= 0:
        raise ValueError(f"agc_lambda must be positive, got {agc_lambda}")
    g = grad.reshape(grad.shape[0], -1)
    w = weight.reshape(weight.shape[0], -1)
    g_norm = g.norm(dim=1, keepdim=True)
    max_norm = agc_lambda * w.norm(dim=1, keepdim=True).clamp_min(agc_eps)
    scale = torch.where(g_norm > max_norm, max_norm / g_norm.clamp_min(1e-12),
                        torch.ones_like(g_norm))
    return (g * scale).reshape(grad.shape)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _method_loss(model, xb, yb, cfg: TrainConfig, attack_cfg, augmenter, aug_rng):
    m = cfg.method
    if m == MethodKind.ST:
        return F.cross_entropy(model(xb), yb)
    if m in (MethodKind.SAT, MethodKind.PGDAT, MethodKind.NOFROST, MethodKind.MBNAT):
        return at_loss(model, xb, yb, method_lambda(cfg), attack_cfg)
    if m == MethodKind.FAT:
        return at_loss(model, xb, yb, 1.0, attack_cfg, attack_fn=fat_early_stop_pgd)
    if m == MethodKind.TRADES:
        return trades_loss(model, xb, yb, cfg.trades_beta, attack_cfg)
    if m == MethodKind.TRADES_FAT:
        return trades_loss(model, xb, yb, cfg.trades_beta, attack_cfg, early_stop=True)
    if m in _AUGMENTED_METHODS:
        return nofrost_star_loss(model, xb, yb, augmenter, attack_cfg, rng=aug_rng)
    raise ValueError(f"unknown method {m!r}")


def _accuracy(model, images, labels, batch_size=256, routing=None):
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = images[start:start + batch_size]
            yb = labels[start:start + batch_size]
            logits = model(xb, routing=routing) if routing is not None else model(xb)
            correct += int((logits.argmax(dim=1) == yb).sum())
    return correct, images.shape[0]


def _robust_accuracy(model, images, labels, attack_cfg, batch_size=256, mbn=False):
    attack_view = RoutedModel(model, "adv") if mbn else model
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        adv = pgd(attack_view, xb, yb, attack_cfg)
        with torch.no_grad():
            preds = attack_view(adv.x_star).argmax(dim=1)
        correct += int((preds == yb).sum())
    return correct, images.shape[0]


@dataclass
class TrainResult:
    model: ResidualClassifier
    history: list
    checkpoints: dict


def _decay_split(model):
    decay, no_decay = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    return decay, no_decay


def _named_weight_params(model):
    return [(n, p) for n, p in model.named_parameters() if p.ndim >= 2]


def _write_history(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"],
                             f"{row['lr']:.8f}",
                             f"{row['train_loss']:.6f}",
                             f"{row['clean_acc']:.4f}",
                             "" if row["pgd_acc"] is None else f"{row['pgd_acc']:.4f}",
                             f"{row['wall_time']:.3f}"])


def read_history(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "epoch": int(rec["epoch"]),
                "lr": float(rec["lr"]),
                "train_loss": float(rec["train_loss"]),
                "clean_acc": float(rec["clean_acc"]),
                "pgd_acc": None if rec["pgd_acc"] == "" else float(rec["pgd_acc"]),
                "wall_time": float(rec["wall_time"]),
            })
    return rows


def train(train_split, eval_split, model_cfg: ModelConfig, cfg: TrainConfig, *,
          out_dir=None, augmenter=None, resume=False, config_hash=None,
          log_fn=None) -> TrainResult:
    """Run one training job; returns the final model plus per-epoch history.

    ``train_split`` / ``eval_split`` expose ``.images`` ([N,C,H,W] float in
    [0,1]) and ``.labels`` ([N] long).  With ``out_dir`` set, writes
    ``history.csv``, rolling ``last.npz``, ``best_clean.npz``,
    ``best_robust.npz`` checkpoints, and a ``trainer_state.npz`` sidecar that
    makes ``resume=True`` continue bit-exactly where the run stopped.  Non-
    finite losses abort with :class:`TrainingDivergedError`, retaining the
    last epoch's checkpoint.

    Seeding: model init from ``cfg.seed``; batch shuffling, augmentation, and
    per-step attack seeds from fixed offsets of it.  Two calls with identical
    inputs produce identical weights and history.
    """
    if cfg.method in _AUGMENTED_METHODS and augmenter is None:
        raise ValueError(f"method {cfg.method.value} requires an augmenter")
    validate_method_model(cfg.method, model_cfg.norm)
    n = train_split.images.shape[0]
    if n == 0 or eval_split.images.shape[0] == 0:
        raise ValueError("train and eval splits must be non-empty")

    torch.manual_seed(cfg.seed)
    model = ResidualClassifier(model_cfg)
    decay, no_decay = _decay_split(model)
    opt = torch.optim.SGD([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.lr0, momentum=cfg.momentum)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed + 1)
    aug_rng = torch.Generator().manual_seed(cfg.seed + 2)

    out = Path(out_dir) if out_dir is not None else None
    ckpt_paths = {}
    history = []
    start_epoch = 0
    global_step = 0
    best_clean = -1.0
    best_robust = -1.0
    wall_base = 0.0

    def _meta(epoch):
        return {"method": cfg.method.value, "norm": model_cfg.norm.value,
                "seed": cfg.seed, "epoch": epoch,
                "config_hash": config_hash or ""}

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state_path = out / "trainer_state.npz"
        if resume and state_path.exists() and (out / "last.npz").exists():
            loaded_model, _ = load_checkpoint(out / "last.npz")
            model.load_state_dict(loaded_model.state_dict())
            arrays, extra = load_trainer_state(state_path)
            start_epoch = extra["epoch"] + 1
            global_step = extra["global_step"]
            best_clean = extra["best_clean"]
            best_robust = extra["best_robust"]
            wall_base = extra["wall_time"]
            shuffle_gen.set_state(torch.from_numpy(arrays["shuffle_rng"]).to(torch.uint8))
            aug_rng.set_state(torch.from_numpy(arrays["aug_rng"]).to(torch.uint8))
            params = [p for g in opt.param_groups for p in g["params"]]
            for i, p in enumerate(params):
                key = f"mom::{i}"
                if key in arrays:
                    opt.state[p] = {"momentum_buffer": torch.from_numpy(arrays[key])}
            history = read_history(out / "history.csv") if (out / "history.csv").exists() else []
        else:
            save_checkpoint(model, out / "last.npz", _meta(-1))
        ckpt_paths["last"] = out / "last.npz"

    eval_images = eval_split.images
    eval_labels = eval_split.labels
    if cfg.eval_samples is not None and cfg.eval_samples < eval_images.shape[0]:
        eval_images = eval_images[:cfg.eval_samples]
        eval_labels = eval_labels[:cfg.eval_samples]
    eval_attack = cfg.resolved_eval_attack()
    mbn = model_cfg.norm == NormStrategy.MBN
    adversarial = cfg.method != MethodKind.ST

    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        for group in opt.param_groups:
            group["lr"] = lr
        # optional curriculum: ramp the training eps from 0 so the adversarial
        # term meets a net that has already fit something (eval eps untouched)
        eps_scale = 1.0
        if cfg.eps_warmup_epochs > 0:
            eps_scale = min(1.0, epoch / cfg.eps_warmup_epochs)
        model.train()
        perm = torch.randperm(n, generator=shuffle_gen)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = train_split.images[idx]
            yb = train_split.labels[idx]
            attack_cfg = replace(cfg.attack, seed=cfg.attack.seed + 1 + global_step)
            if eps_scale < 1.0:
                step = attack_cfg.step_size
                attack_cfg = replace(
                    attack_cfg, eps=attack_cfg.eps * eps_scale,
                    step_size=None if step is None else step * eps_scale)
            loss = _method_loss(model, xb, yb, cfg, attack_cfg, augmenter, aug_rng)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {global_step}; "
                    f"last good checkpoint: {ckpt_paths.get('last', 'none written')}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.agc_lambda is not None:
                for _, p in _named_weight_params(model):
                    if p.grad is not None:
                        p.grad = agc_clip(p.grad, p.detach(), cfg.agc_lambda, cfg.agc_eps)
            opt.step()
            epoch_loss += float(loss.detach())
            batches += 1
            global_step += 1

        model.eval()
        c_correct, c_total = _accuracy(model, eval_images, eval_labels,
                                       routing="clean" if mbn else None)
        clean_acc = 100.0 * c_correct / c_total
        pgd_acc = None
        if adversarial:
            r_correct, r_total = _robust_accuracy(model, eval_images, eval_labels,
                                                  eval_attack, mbn=mbn)
            pgd_acc = 100.0 * r_correct / r_total
        row = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(batches, 1),
               "clean_acc": clean_acc, "pgd_acc": pgd_acc,
               "wall_time": wall_base + time.time() - t0}
        history.append(row)
        if log_fn is not None:
            log_fn(row)

        if out is not None:
            _write_history(out / "history.csv", history)
            save_checkpoint(model, out / "last.npz", _meta(epoch))
            if clean_acc > best_clean:
                save_checkpoint(model, out / "best_clean.npz", _meta(epoch))
                ckpt_paths["best_clean"] = out / "best_clean.npz"
            robust_score = pgd_acc if pgd_acc is not None else clean_acc
            if robust_score > best_robust:
                save_checkpoint(model, out / "best_robust.npz", _meta(epoch))
                ckpt_paths["best_robust"] = out / "best_robust.npz"
            arrays = {"shuffle_rng": shuffle_gen.get_state().numpy(),
                      "aug_rng": aug_rng.get_state().numpy()}
            params = [p for g in opt.param_groups for p in g["params"]]
            for i, p in enumerate(params):
                buf = opt.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"mom::{i}"] = buf.detach().cpu().numpy()
            save_trainer_state(out / "trainer_state.npz", arrays,
                               {"epoch": epoch, "global_step": global_step,
                                "best_clean": max(best_clean, clean_acc),
                                "best_robust": max(best_robust, robust_score),
                                "wall_time": row["wall_time"]})
        best_clean = max(best_clean, clean_acc)
        robust_score = pgd_acc if pgd_acc is not None else clean_acc
        best_robust = max(best_robust, robust_score)

    model.eval()
    return TrainResult(model=model, history=history, checkpoints=ckpt_paths)
