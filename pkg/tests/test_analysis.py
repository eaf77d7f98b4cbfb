"""Metric and probe unit tests against closed-form and frozen oracles."""

import math

import numpy as np
import pytest
import torch

from nofrost.analysis import (
    EvalReport,
    MetricConfig,
    StatsScatter,
    ThicknessConfig,
    bn_stats_scatter,
    boundary_thickness,
    boundary_thickness_from_pair,
    decision_margin,
    default_attack_suite,
    evaluate,
    model_smoothness,
    stats_mean_ks,
    tradeoff_sweep,
    write_reports_csv,
)
from nofrost.attacks import AttackConfig
from nofrost.nfcore.models import (
    Interpolate,
    ModelConfig,
    ResidualClassifier,
    UnsupportedProbeError,
)
from nofrost.objectives import MethodKind, TrainConfig, train


class Split:
    def __init__(self, images, labels):
        self.images = images
        self.labels = labels


def tiny_model(norm="bn", seed=0):
    torch.manual_seed(seed)
    m = ResidualClassifier(ModelConfig(depth=8, width=4, num_classes=2,
                                       norm=norm, in_channels=1))
    m.eval()
    return m


def test_decision_margin_closed_form():
    # softmax([2, -1, 0.5]) = [0.78559..., 0.03911..., 0.17529...]
    p = torch.softmax(torch.tensor([2.0, -1.0, 0.5]), dim=0)
    m = decision_margin(p, 0)
    assert m.item() == pytest.approx(0.6103066424492392, abs=1e-6)
    # wrong label: margin is negative
    m_wrong = decision_margin(p, 1)
    assert m_wrong.item() == pytest.approx(0.03911257 - 0.78559703, abs=1e-6)


def test_decision_margin_batch_and_bounds():
    p = torch.tensor([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
    y = torch.tensor([0, 0, 0])
    m = decision_margin(p, y)
    assert torch.allclose(m, torch.tensor([0.8, 0.0, -0.6]), atol=1e-6)
    assert torch.all(m >= -1.0) and torch.all(m <= 1.0)


def test_decision_margin_rejects_non_probabilities():
    with pytest.raises(ValueError):
        decision_margin(torch.tensor([2.0, -1.0]), 0)
    with pytest.raises(ValueError):
        decision_margin(torch.tensor([0.9, 0.4]), 0)


def test_model_smoothness_closed_form():
    # KL([0.5, 0.5] || [0.9, 0.1]) = 0.5108256237659907
    got = model_smoothness(torch.tensor([0.5, 0.5]), torch.tensor([0.9, 0.1]))
    assert got.item() == pytest.approx(0.5108256237659907, abs=1e-6)


def test_model_smoothness_identical_is_zero():
    p = torch.tensor([[0.3, 0.7], [0.9, 0.1]])
    got = model_smoothness(p, p)
    assert torch.all(got == 0)


def test_model_smoothness_zero_mass_stays_finite():
    p = torch.tensor([0.5, 0.5])
    q = torch.tensor([1.0, 0.0])
    got = model_smoothness(p, q)
    # 0.5*log(0.5/1) + 0.5*log(0.5/1e-12), finite and positive
    want = 0.5 * math.log(0.5) + 0.5 * (math.log(0.5) - math.log(1e-12))
    assert math.isfinite(got.item())
    assert got.item() == pytest.approx(want, rel=1e-6)


def test_thickness_config_validation():
    with pytest.raises(ValueError):
        ThicknessConfig(alpha=0.8, beta=0.75)
    with pytest.raises(ValueError):
        ThicknessConfig(quadrature_points=1)
    with pytest.raises(ValueError):
        ThicknessConfig(attack_eps=0.0)


def test_thickness_from_pair_full_segment_inside():
    # A constant-output model keeps the gap p_i - p_j fixed at 0 for i != j,
    # which lies inside (alpha, beta) = (-0.5, 0.5): thickness = ||x - x*||_2.
    class Flat(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 2)

    x = torch.zeros(3, 1, 4, 4)
    x_star = torch.ones(3, 1, 4, 4)
    cfg = ThicknessConfig(alpha=-0.5, beta=0.5, quadrature_points=10)
    out = boundary_thickness_from_pair(Flat(), x, x_star,
                                       torch.zeros(3, dtype=torch.long),
                                       torch.ones(3, dtype=torch.long), cfg)
    assert torch.allclose(out, torch.full((3,), 4.0), atol=1e-6)


def test_thickness_from_pair_outside_band_is_zero():
    # Gap pinned near +1 (confident class i): outside (alpha, beta) = (0, 0.75).
    class Confident(torch.nn.Module):
        def forward(self, x):
            z = torch.zeros(x.shape[0], 2)
            z[:, 0] = 50.0
            return z

    x = torch.zeros(2, 1, 4, 4)
    x_star = torch.ones(2, 1, 4, 4)
    cfg = ThicknessConfig(alpha=0.0, beta=0.75, quadrature_points=10)
    out = boundary_thickness_from_pair(Confident(), x, x_star,
                                       torch.zeros(2, dtype=torch.long),
                                       torch.ones(2, dtype=torch.long), cfg)
    assert torch.all(out == 0)


def test_boundary_thickness_runs_on_real_model():
    model = tiny_model(seed=1)
    g = torch.Generator().manual_seed(2)
    x = torch.rand(4, 1, 8, 8, generator=g)
    cfg = ThicknessConfig(attack_steps=5, quadrature_points=20)
    out = boundary_thickness(model, x, cfg)
    assert out.shape == (4,)
    assert torch.all(out >= 0)
    # deterministic across calls
    out2 = boundary_thickness(model, x, cfg)
    assert torch.equal(out, out2)


def test_bn_stats_scatter_plain_and_mixture():
    model = tiny_model(norm="bn", seed=3)
    with torch.no_grad():
        model.norm_sites[0].running_mean.fill_(1.5)
        model.norm_sites[0].running_var.fill_(2.0)
    scat = bn_stats_scatter(model, 0, "bn_model")
    assert len(scat) == 1
    assert np.allclose(scat[0].means, 1.5)
    assert np.allclose(scat[0].variances, 2.0)
    rows = scat[0].rows()
    assert rows[0] == ("bn_model", 0, 0, 1.5, 2.0)

    mmodel = tiny_model(norm="mbn", seed=4)
    scats = bn_stats_scatter(mmodel, 0, "mbn_model")
    assert [s.branch for s in scats] == ["clean", "adv"]
    assert scats[0].rows()[0][0] == "mbn_model/clean"


def test_bn_stats_scatter_unsupported_models():
    with pytest.raises(UnsupportedProbeError):
        bn_stats_scatter(tiny_model(norm="nf", seed=5), 0, "x")
    with pytest.raises(UnsupportedProbeError):
        bn_stats_scatter(tiny_model(norm="in", seed=6), 0, "x")
    with pytest.raises(IndexError):
        bn_stats_scatter(tiny_model(norm="bn", seed=7), 99, "x")


def test_stats_mean_ks_separates_shifted_samples():
    g = np.random.default_rng(0)
    a = StatsScatter(0, "a", g.normal(0.0, 1.0, 64), np.ones(64))
    b = StatsScatter(0, "b", g.normal(3.0, 1.0, 64), np.ones(64))
    stat_ab, p_ab = stats_mean_ks(a, b)
    stat_aa, p_aa = stats_mean_ks(a, a)
    assert stat_ab > 0.8 and p_ab < 1e-6
    assert stat_aa == 0.0 and p_aa == pytest.approx(1.0)


def test_default_attack_suite_composition():
    suite = default_attack_suite(eps=0.03, steps=7, seed=5)
    names = [n for n, _ in suite]
    assert names == ["pgd", "pgd_t", "cw", "mia", "fat"]
    cfgs = dict(suite)
    assert cfgs["pgd_t"].loss_kind == "targeted_cross_entropy"
    assert cfgs["cw"].loss_kind == "cw_margin"
    assert cfgs["mia"].momentum_decay == 1.0
    assert cfgs["fat"].early_stop
    assert all(c.eps == 0.03 and c.steps == 7 for c in cfgs.values())


def _quick_eval_split(n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Split(torch.rand(n, 1, 8, 8, generator=g),
                 torch.randint(0, 2, (n,), generator=g))


def test_evaluate_report_roundtrip_and_fields():
    model = tiny_model(seed=8)
    split = _quick_eval_split()
    mc = MetricConfig(n_samples=16, thickness_samples=4,
                      thickness=ThicknessConfig(attack_steps=3, quadrature_points=10),
                      smoothness_attack=AttackConfig(eps=0.03, steps=3))
    suite = [("pgd", AttackConfig(eps=0.03, steps=3))]
    rep = evaluate(model, split, attack_suite=suite, metric_cfg=mc)
    assert 0.0 <= rep.clean_acc <= 100.0
    assert set(rep.attack_acc) == {"pgd"}
    assert rep.n_eval == 64
    assert rep.n_metric_samples == 16
    assert sum(rep.per_class_total) == 64
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    flat = rep.flat()
    assert "attack:pgd" in flat and "clean_acc" in flat


def test_evaluate_deterministic():
    model = tiny_model(seed=9)
    split = _quick_eval_split(seed=1)
    mc = MetricConfig(n_samples=8, thickness_samples=2,
                      thickness=ThicknessConfig(attack_steps=2, quadrature_points=4),
                      smoothness_attack=AttackConfig(eps=0.03, steps=2))
    r1 = evaluate(model, split, metric_cfg=mc)
    r2 = evaluate(model, split, metric_cfg=mc)
    assert r1 == r2


def test_tradeoff_sweep_requires_mbn_and_produces_rows(tmp_path):
    model = tiny_model(seed=10)
    split = _quick_eval_split(32, seed=2)
    with pytest.raises(ValueError):
        tradeoff_sweep(model, split, [0.0], [])

    d = Split(torch.rand(64, 1, 8, 8), torch.randint(0, 2, (64,)))
    mcfg = ModelConfig(depth=8, width=4, num_classes=2, norm="mbn", in_channels=1)
    tcfg = TrainConfig(method=MethodKind.MBNAT, epochs=1, batch_size=32, lr0=0.05,
                       attack=AttackConfig(eps=0.03, steps=2), eval_samples=16)
    mbn_model = train(d, split, mcfg, tcfg).model
    rows = tradeoff_sweep(mbn_model, split, [0.0, 1.0],
                          [("pgd", AttackConfig(eps=0.03, steps=2))])
    assert [r["gamma"] for r in rows] == [0.0, 1.0]
    assert all({"gamma", "clean_acc", "pgd_acc"} <= set(r) for r in rows)

    # gamma=0 equals the clean-branch accuracy computed directly
    from nofrost.nfcore.models import RoutedModel
    view = RoutedModel(mbn_model, Interpolate(0.0))
    with torch.no_grad():
        acc = 100.0 * float((view(split.images).argmax(1) == split.labels).float().mean())
    assert rows[0]["clean_acc"] == pytest.approx(acc, abs=1e-9)


def test_write_reports_csv(tmp_path):
    rep = EvalReport(clean_acc=90.0, attack_acc={"pgd": 40.0}, corruption_acc={},
                     margin_mean=0.5, thickness_mean=1.0, smoothness_mean=0.1,
                     n_eval=100, n_metric_samples=50,
                     per_class_correct=[45, 45], per_class_total=[50, 50])
    path = write_reports_csv([("m1", rep)], tmp_path / "r.csv")
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("name,")
    assert "attack:pgd" in lines[0]
    assert lines[1].startswith("m1,")
