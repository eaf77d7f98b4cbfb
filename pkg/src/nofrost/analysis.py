"""Robustness metrics, normalization-statistics probes, and model evaluation.

Three per-model metrics summarize how a trained classifier shapes its decision
geometry: the probability margin on clean inputs, boundary thickness along
clean-to-adversarial segments, and the clean-vs-adversarial output divergence
(smoothness).  The statistics probe extracts running mean/variance banks from
normalization sites for scatter plots and two-sample tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats as scipy_stats

from .attacks import (AttackConfig, fat_early_stop_pgd, pgd, select_targets,
                      targeted_pgd, trades_inner_max)
from .augment import corrupt
from .nfcore.layers import MixtureBatchNorm2d
from .nfcore.models import RoutedModel, bn_running_stats

KL_FLOOR = 1e-12  # probability floor inside the smoothness logarithms
_PROB_ATOL = 1e-4


@dataclass
class ThicknessConfig:
    """Boundary-thickness estimator knobs.

    The segment runs from x to a targeted adversarial endpoint; thickness is
    ``||x - x*||_2`` times the fraction of midpoint-rule points where the
    probability gap ``p_i - p_j`` lies strictly inside (alpha, beta).  The
    endpoint attack uses a deliberately generous ball (``attack_eps`` on the
    input scale) so the segment actually crosses the boundary.
    """
    alpha: float = 0.0
    beta: float = 0.75
    attack_steps: int = 20
    quadrature_points: int = 100
    attack_eps: float = 1.0
    attack_step_size: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not -1.0 <= self.alpha < self.beta <= 1.0:
            raise ValueError(f"need -1 <= alpha < beta <= 1, got ({self.alpha}, {self.beta})")
        if self.quadrature_points < 2:
            raise ValueError(f"quadrature_points must be >= 2, got {self.quadrature_points}")
        if self.attack_steps <= 0:
            raise ValueError(f"attack_steps must be positive, got {self.attack_steps}")
        if self.attack_eps <= 0:
            raise ValueError(f"attack_eps must be positive, got {self.attack_eps}")


def _check_probs(p):
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError(f"expected probability rows [B, K>=2], got shape {tuple(p.shape)}")
    if float(p.min()) < -_PROB_ATOL or float((p.sum(dim=1) - 1.0).abs().max()) > _PROB_ATOL:
        raise ValueError("rows must be probability vectors (nonnegative, summing to 1)")
    return p


def decision_margin(p, y):
    """Probability margin ``p_y - max_{i != y} p_i`` (in [-1, 1]); batch-aware."""
    p = torch.as_tensor(p, dtype=torch.get_default_dtype())
    single = p.ndim == 1
    p = _check_probs(p)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if y.shape[0] != p.shape[0]:
        raise ValueError(f"labels shape {tuple(y.shape)} does not match batch {p.shape[0]}")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise ValueError("labels out of range")
    true_p = p.gather(1, y[:, None]).squeeze(1)
    best_other = p.scatter(1, y[:, None], float("-inf")).max(dim=1).values
    margin = true_p - best_other
    return margin[0] if single else margin


def model_smoothness(p_clean, p_adv):
    """KL(p_clean || p_adv) with probabilities floored at 1e-12 inside the logs.

    Floored and clamped at zero, so the result is finite and nonnegative even
    when the adversarial distribution collapses a class to zero mass.
    """
    p = torch.as_tensor(p_clean, dtype=torch.get_default_dtype())
    q = torch.as_tensor(p_adv, dtype=torch.get_default_dtype())
    single = p.ndim == 1
    p = _check_probs(p)
    q = _check_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    kl = (p * (torch.log(p.clamp_min(KL_FLOOR)) - torch.log(q.clamp_min(KL_FLOOR)))).sum(dim=1)
    kl = kl.clamp_min(0.0)
    return kl[0] if single else kl


def boundary_thickness_from_pair(model, x, x_star, class_i, class_j,
                                 cfg: ThicknessConfig, chunk=16):
    """Thickness of the (class_i, class_j) boundary along segments x -> x_star."""
    if x.shape != x_star.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_star.shape)}")
    n = x.shape[0]
    dist = (x - x_star).flatten(1).norm(dim=1)
    ts = (torch.arange(cfg.quadrature_points, dtype=x.dtype) + 0.5) / cfg.quadrature_points
    inside = torch.zeros(n, dtype=x.dtype)
    with torch.no_grad():
        for start in range(0, cfg.quadrature_points, chunk):
            tc = ts[start:start + chunk]
            # points[k, b] = t_k * x_b + (1 - t_k) * x*_b, flattened to one batch
            pts = (tc.view(-1, 1, 1, 1, 1) * x.unsqueeze(0)
                   + (1.0 - tc.view(-1, 1, 1, 1, 1)) * x_star.unsqueeze(0))
            probs = F.softmax(model(pts.reshape(-1, *x.shape[1:])), dim=1)
            probs = probs.reshape(len(tc), n, -1)
            gi = probs.gather(2, class_i.view(1, -1, 1).expand(len(tc), -1, 1)).squeeze(2)
            gj = probs.gather(2, class_j.view(1, -1, 1).expand(len(tc), -1, 1)).squeeze(2)
            gap = gi - gj
            inside += ((gap > cfg.alpha) & (gap < cfg.beta)).to(x.dtype).sum(dim=0)
    return dist * inside / cfg.quadrature_points


def boundary_thickness(model, x, cfg: ThicknessConfig):
    """Per-sample boundary thickness via a targeted attack toward a random other class.

    Class i is the model's prediction at x; class j is drawn uniformly from
    the remaining classes under ``cfg.seed``.  Returns a [B] tensor.
    """
    single = x.ndim == 3
    xb = x.unsqueeze(0) if single else x
    model.eval()
    with torch.no_grad():
        logits = model(xb)
    preds = logits.argmax(dim=1)
    num_classes = logits.shape[1]
    gen = torch.Generator().manual_seed(cfg.seed)
    offset = torch.randint(1, num_classes, preds.shape, generator=gen)
    targets = (preds + offset) % num_classes
    acfg = AttackConfig(eps=cfg.attack_eps, steps=cfg.attack_steps,
                        step_size=cfg.attack_step_size, random_init=False,
                        loss_kind="targeted_cross_entropy", target_rule="fixed",
                        target_class=0, seed=cfg.seed)
    adv = targeted_pgd(model, xb, targets, acfg)
    out = boundary_thickness_from_pair(model, xb, adv.x_star, preds, targets, cfg)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# statistics probes

@dataclass
class StatsScatter:
    """Per-channel running (mean, variance) points from one normalization site."""
    layer_index: int
    source_label: str
    means: np.ndarray
    variances: np.ndarray
    branch: str | None = None

    def rows(self):
        label = self.source_label if self.branch is None else f"{self.source_label}/{self.branch}"
        return [(label, self.layer_index, c, float(m), float(v))
                for c, (m, v) in enumerate(zip(self.means, self.variances))]


def bn_stats_scatter(model, layer_index: int, label: str):
    """Scatter(s) of running statistics at one site: one entry for plain BN,
    one per branch for mixture BN.  Raises UnsupportedProbeError for models
    without running statistics."""
    site = model.norm_sites[layer_index] if model.norm_sites else None
    stats = bn_running_stats(model, layer_index)
    if isinstance(site, MixtureBatchNorm2d):
        out = []
        for branch in ("clean", "adv"):
            pairs = stats[branch]
            out.append(StatsScatter(layer_index, label,
                                    np.array([m for m, _ in pairs]),
                                    np.array([v for _, v in pairs]), branch))
        return out
    return [StatsScatter(layer_index, label,
                         np.array([m for m, _ in stats]),
                         np.array([v for _, v in stats]))]


def stats_mean_ks(a: StatsScatter, b: StatsScatter):
    """Two-sample Kolmogorov-Smirnov test on the channel means of two scatters."""
    res = scipy_stats.ks_2samp(a.means, b.means)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# full evaluation

@dataclass
class MetricConfig:
    """Subset sizes and attack settings for the three geometry metrics."""
    n_samples: int = 500
    max_classes: int = 10
    thickness_samples: int = 100
    thickness: ThicknessConfig = field(default_factory=ThicknessConfig)
    smoothness_attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=20))

    def __post_init__(self):
        if self.n_samples <= 0 or self.thickness_samples <= 0:
            raise ValueError("metric sample counts must be positive")


@dataclass
class EvalReport:
    """Evaluation summary; accuracies are exact percentages (correct / n * 100)."""
    clean_acc: float
    attack_acc: dict
    corruption_acc: dict
    margin_mean: float
    thickness_mean: float
    smoothness_mean: float
    n_eval: int
    n_metric_samples: int
    per_class_correct: list
    per_class_total: list

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def flat(self) -> dict:
        out = {"clean_acc": self.clean_acc,
               "margin_mean": self.margin_mean,
               "thickness_mean": self.thickness_mean,
               "smoothness_mean": self.smoothness_mean,
               "n_eval": self.n_eval,
               "n_metric_samples": self.n_metric_samples}
        for k in sorted(self.attack_acc):
            out[f"attack:{k}"] = self.attack_acc[k]
        for k in sorted(self.corruption_acc):
            out[f"corruption:{k}"] = self.corruption_acc[k]
        return out


def default_attack_suite(eps=8 / 255, steps=20, seed=0):
    """The five evaluation attacks: PGD, targeted PGD, CW, momentum, early-stop."""
    base = AttackConfig(eps=eps, steps=steps, seed=seed)
    return [
        ("pgd", base),
        ("pgd_t", replace(base, loss_kind="targeted_cross_entropy", target_rule="random_other")),
        ("cw", replace(base, loss_kind="cw_margin")),
        ("mia", replace(base, momentum_decay=1.0)),
        ("fat", replace(base, early_stop=True)),
    ]


def run_attack(model, x, y, num_classes, cfg: AttackConfig):
    """Dispatch one attack config to the matching variant."""
    if cfg.loss_kind == "targeted_cross_entropy":
        gen = torch.Generator().manual_seed(cfg.seed)
        targets = select_targets(y, num_classes, cfg, gen)
        return targeted_pgd(model, x, targets, cfg)
    if cfg.loss_kind == "kl_vs_reference":
        return trades_inner_max(model, x, cfg)
    if cfg.early_stop:
        return fat_early_stop_pgd(model, x, y, cfg)
    return pgd(model, x, y, cfg)


def _batched_correct(fn, images, labels, batch_size):
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        correct += fn(images[start:start + batch_size],
                      labels[start:start + batch_size], start // batch_size)
    return correct


def evaluate(model, split, attack_suite=None, corruption_suite=None,
             metric_cfg: MetricConfig | None = None, routing=None,
             batch_size=256, corruption_seed=0) -> EvalReport:
    """Full evaluation: clean/robust/corruption accuracy plus geometry metrics.

    ``attack_suite`` is a list of (name, AttackConfig); per-batch attack seeds
    are derived from each config's seed, so reports are reproducible for
    identical inputs.  For mixture-BN models pass ``routing`` (branch name or
    Interpolate); attacks then run white-box against that same inference path.
    """
    images, labels = split.images, split.labels
    n = images.shape[0]
    if n == 0:
        raise ValueError("evaluation split is empty")
    metric_cfg = metric_cfg or MetricConfig()
    view = RoutedModel(model, routing) if routing is not None else model
    model.eval()
    with torch.no_grad():
        num_classes = view(images[:1]).shape[1]

    per_class_correct = [0] * num_classes
    per_class_total = [0] * num_classes
    with torch.no_grad():
        for start in range(0, n, batch_size):
            xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
            preds = view(xb).argmax(dim=1)
            for cls in range(num_classes):
                mask = yb == cls
                per_class_total[cls] += int(mask.sum())
                per_class_correct[cls] += int((preds[mask] == cls).sum())
    clean_correct = sum(per_class_correct)

    attack_acc = {}
    for name, acfg in (attack_suite or []):
        def attacked(xb, yb, bidx, acfg=acfg):
            batch_cfg = replace(acfg, seed=acfg.seed + bidx)
            adv = run_attack(view, xb, yb, num_classes, batch_cfg)
            with torch.no_grad():
                return int((view(adv.x_star).argmax(dim=1) == yb).sum())
        attack_acc[name] = 100.0 * _batched_correct(attacked, images, labels, batch_size) / n

    corruption_acc = {}
    for spec in (corruption_suite or []):
        def corrupted(xb, yb, bidx, spec=spec):
            xc = corrupt(xb, spec, seed=corruption_seed + bidx)
            with torch.no_grad():
                return int((view(xc).argmax(dim=1) == yb).sum())
        corruption_acc[spec.label] = 100.0 * _batched_correct(corrupted, images, labels, batch_size) / n

    # geometry metrics on a deterministic subset: first n_samples in dataset
    # order whose label falls within the first max_classes classes
    keep = (labels < metric_cfg.max_classes).nonzero().flatten()[:metric_cfg.n_samples]
    mx, my = images[keep], labels[keep]
    with torch.no_grad():
        p_clean = torch.cat([F.softmax(view(mx[s:s + batch_size]), dim=1)
                             for s in range(0, mx.shape[0], batch_size)])
    margin_mean = float(decision_margin(p_clean, my).mean())

    sm_adv = run_attack(view, mx, my, num_classes, metric_cfg.smoothness_attack)
    with torch.no_grad():
        p_adv = torch.cat([F.softmax(view(sm_adv.x_star[s:s + batch_size]), dim=1)
                           for s in range(0, mx.shape[0], batch_size)])
    smoothness_mean = float(model_smoothness(p_clean, p_adv).mean())

    tx = mx[:metric_cfg.thickness_samples]
    thickness_mean = float(boundary_thickness(view, tx, metric_cfg.thickness).mean())

    return EvalReport(
        clean_acc=100.0 * clean_correct / n,
        attack_acc=attack_acc,
        corruption_acc=corruption_acc,
        margin_mean=margin_mean,
        thickness_mean=thickness_mean,
        smoothness_mean=smoothness_mean,
        n_eval=n,
        n_metric_samples=int(mx.shape[0]),
        per_class_correct=per_class_correct,
        per_class_total=per_class_total,
    )


def tradeoff_sweep(model, split, gammas, attack_suite, mix_set=frozenset(),
                   batch_size=256):
    """Clean/robust accuracy of a mixture-BN model across interpolation weights.

    Returns one row dict per gamma: {"gamma", "clean_acc", "<attack>_acc"...}.
    Attacks are generated against the interpolated inference path itself.
    """
    from .nfcore.models import Interpolate, NormStrategy
    if getattr(model.cfg, "norm", None) != NormStrategy.MBN:
        raise ValueError("tradeoff_sweep requires a mixture-BN model")
    images, labels = split.images, split.labels
    n = images.shape[0]
    rows = []
    for gamma in gammas:
        routing = Interpolate(float(gamma), frozenset(mix_set))
        view = RoutedModel(model, routing)
        with torch.no_grad():
            num_classes = view(images[:1]).shape[1]
            clean = 0
            for start in range(0, n, batch_size):
                xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
                clean += int((view(xb).argmax(dim=1) == yb).sum())
        row = {"gamma": float(gamma), "clean_acc": 100.0 * clean / n}
        for name, acfg in attack_suite:
            def attacked(xb, yb, bidx, acfg=acfg):
                adv = run_attack(view, xb, yb, num_classes, replace(acfg, seed=acfg.seed + bidx))
                with torch.no_grad():
                    return int((view(adv.x_star).argmax(dim=1) == yb).sum())
            row[f"{name}_acc"] = 100.0 * _batched_correct(attacked, images, labels, batch_size) / n
        rows.append(row)
    return rows


def write_reports_csv(named_reports, path):
    """One CSV row per (name, EvalReport); columns are the union of flat keys."""
    names = [n for n, _ in named_reports]
    flats = [r.flat() for _, r in named_reports]
    cols = sorted({k for f in flats for k in f})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["name"] + cols) + "\n")
        for name, flat in zip(names, flats):
            vals = [name] + [("" if k not in flat else f"{flat[k]:.6f}") for k in cols]
            fh.write(",".join(vals) + "\n")
    return path
