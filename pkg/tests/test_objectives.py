"""Objective/loss-family unit tests plus small end-to-end training checks."""

import math

import pytest
import torch
import torch.nn.functional as F

from nofrost.attacks import AttackConfig, pgd
from nofrost.nfcore.models import ModelConfig, NormStrategy, ResidualClassifier
from nofrost.objectives import (
    MethodKind,
    TrainConfig,
    TrainingDivergedError,
    agc_clip,
    at_loss,
    cosine_lr,
    method_lambda,
    nofrost_star_loss,
    read_history,
    trades_loss,
    train,
    validate_method_model,
)


class Split:
    def __init__(self, images, labels):
        self.images = images
        self.labels = labels


def tiny_data(n=60, seed=0, size=8):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 1, size, size, generator=g)
    y = torch.randint(0, 2, (n,), generator=g)
    return Split(x, y)


def tiny_model(norm="bn", seed=0, num_classes=2):
    torch.manual_seed(seed)
    m = ResidualClassifier(ModelConfig(depth=8, width=4, num_classes=num_classes,
                                       norm=norm, in_channels=1))
    m.eval()
    return m


def test_method_lambda_fixed_points():
    assert method_lambda(TrainConfig(method=MethodKind.ST, lam=0.7)) == 0.0
    assert method_lambda(TrainConfig(method=MethodKind.PGDAT, lam=0.3)) == 1.0
    assert method_lambda(TrainConfig(method=MethodKind.FAT, lam=0.3)) == 1.0
    assert method_lambda(TrainConfig(method=MethodKind.SAT, lam=0.25)) == 0.25


def test_validate_method_model_pairs():
    validate_method_model(MethodKind.NOFROST, NormStrategy.NF)
    validate_method_model(MethodKind.MBNAT, NormStrategy.MBN)
    validate_method_model(MethodKind.COMBINE, NormStrategy.BN)
    with pytest.raises(ValueError):
        validate_method_model(MethodKind.NOFROST, NormStrategy.BN)
    with pytest.raises(ValueError):
        validate_method_model(MethodKind.MBNAT, NormStrategy.BN)
    with pytest.raises(ValueError):
        validate_method_model(MethodKind.SAT, NormStrategy.MBN)
    with pytest.raises(ValueError):
        validate_method_model(MethodKind.COMBINE, NormStrategy.NF)


def test_at_loss_lambda_zero_is_plain_ce_bitwise():
    model = tiny_model()
    d = tiny_data(16)
    got = at_loss(model, d.images, d.labels, 0.0, AttackConfig(eps=0.03, steps=3))
    want = F.cross_entropy(model(d.images), d.labels)
    assert got.item() == want.item()


def test_at_loss_lambda_one_matches_manual_adv_ce():
    model = tiny_model(seed=1)
    d = tiny_data(12, seed=1)
    cfg = AttackConfig(eps=0.03, steps=3, seed=5)
    got = at_loss(model, d.images, d.labels, 1.0, cfg)
    adv = pgd(model, d.images, d.labels, cfg)
    want = F.cross_entropy(model(adv.x_star), d.labels)
    assert got.item() == pytest.approx(want.item(), rel=1e-6)


def test_at_loss_midpoint_is_convex_combination():
    model = tiny_model(seed=2)
    d = tiny_data(12, seed=2)
    cfg = AttackConfig(eps=0.03, steps=3, seed=6)
    mid = at_loss(model, d.images, d.labels, 0.5, cfg)
    clean = F.cross_entropy(model(d.images), d.labels)
    adv = pgd(model, d.images, d.labels, cfg)
    advce = F.cross_entropy(model(adv.x_star), d.labels)
    assert mid.item() == pytest.approx(0.5 * clean.item() + 0.5 * advce.item(), rel=1e-6)


def test_at_loss_rejects_bad_lambda():
    model = tiny_model()
    d = tiny_data(4)
    with pytest.raises(ValueError):
        at_loss(model, d.images, d.labels, 1.5, AttackConfig())


def test_trades_beta_zero_is_plain_ce():
    model = tiny_model(seed=3)
    d = tiny_data(10, seed=3)
    got = trades_loss(model, d.images, d.labels, 0.0, AttackConfig(eps=0.03, steps=2))
    want = F.cross_entropy(model(d.images), d.labels)
    assert got.item() == want.item()


def test_trades_adds_nonnegative_kl_term():
    model = tiny_model(seed=4)
    d = tiny_data(10, seed=4)
    ce = F.cross_entropy(model(d.images), d.labels)
    full = trades_loss(model, d.images, d.labels, 2.0, AttackConfig(eps=0.05, steps=5))
    assert full.item() >= ce.item() - 1e-7


def test_nofrost_star_identity_augment_eps_zero_collapses_to_ce():
    model = tiny_model(norm="nf", seed=5)
    d = tiny_data(10, seed=5)
    got = nofrost_star_loss(model, d.images, d.labels, lambda x, rng: x,
                            AttackConfig(eps=0.0, steps=0, random_init=False))
    want = F.cross_entropy(model(d.images), d.labels)
    assert got.item() == pytest.approx(want.item(), rel=1e-6)


def test_nofrost_star_requires_augmenter():
    model = tiny_model(norm="nf")
    d = tiny_data(4)
    with pytest.raises(ValueError):
        nofrost_star_loss(model, d.images, d.labels, None, AttackConfig())


def test_agc_clip_closed_form():
    # grad row norm 10, weight row norm 1, lambda 0.1 -> clipped norm 0.1
    grad = torch.zeros(2, 4)
    grad[0, 0] = 10.0
    weight = torch.zeros(2, 4)
    weight[0, 1] = 1.0
    weight[1, 1] = 1.0
    out = agc_clip(grad, weight, agc_lambda=0.1)
    assert out[0].norm().item() == pytest.approx(0.1, rel=1e-6)
    assert torch.all(out[1] == 0)  # zero grad untouched


def test_agc_clip_leaves_small_gradients_alone():
    g = torch.Generator().manual_seed(1)
    grad = 1e-4 * torch.randn(3, 5, generator=g)
    weight = torch.randn(3, 5, generator=g)
    out = agc_clip(grad, weight, agc_lambda=1.0)
    assert torch.equal(out, grad)


def test_cosine_lr_frozen_values():
    assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1, rel=1e-12)
    assert cosine_lr(10, 10, 0.1) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(3, 10, 0.1) == pytest.approx(0.07938926261462366, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.2)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(agc_lambda=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(trades_beta=-1.0)


def test_resolved_eval_attack_derivation():
    cfg = TrainConfig(attack=AttackConfig(eps=0.05, steps=5, step_size=0.02, seed=3))
    ev = cfg.resolved_eval_attack()
    assert ev.steps == 20
    assert ev.step_size is None
    assert ev.seed == 3 + 9999
    assert ev.eps == 0.05
    explicit = AttackConfig(eps=0.01, steps=7)
    assert TrainConfig(attack=cfg.attack, eval_attack=explicit).resolved_eval_attack() is explicit


def _quick_cfg(method=MethodKind.ST, epochs=2, seed=0, **kw):
    return TrainConfig(method=method, epochs=epochs, batch_size=32, lr0=0.05,
                       seed=seed, attack=AttackConfig(eps=0.03, steps=2),
                       eval_samples=32, **kw)


def test_train_deterministic_across_calls():
    d = tiny_data(64, seed=7)
    e = tiny_data(32, seed=8)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="bn", in_channels=1)
    r1 = train(d, e, mc, _quick_cfg())
    r2 = train(d, e, mc, _quick_cfg())
    for k, v in r1.model.state_dict().items():
        assert torch.equal(v, r2.model.state_dict()[k]), k
    r3 = train(d, e, mc, _quick_cfg(seed=1))
    same = all(torch.equal(v, r3.model.state_dict()[k])
               for k, v in r1.model.state_dict().items())
    assert not same


def test_train_writes_artifacts(tmp_path):
    d = tiny_data(64, seed=9)
    e = tiny_data(32, seed=10)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="bn", in_channels=1)
    train(d, e, mc, _quick_cfg(method=MethodKind.SAT), out_dir=tmp_path)
    assert (tmp_path / "last.npz").exists()
    assert (tmp_path / "best_clean.npz").exists()
    assert (tmp_path / "best_robust.npz").exists()
    assert (tmp_path / "trainer_state.npz").exists()
    rows = read_history(tmp_path / "history.csv")
    assert [r["epoch"] for r in rows] == [0, 1]
    assert all(r["pgd_acc"] is not None for r in rows)  # adversarial method
    assert all(math.isfinite(r["train_loss"]) for r in rows)


def test_train_st_history_has_blank_pgd_column(tmp_path):
    d = tiny_data(64, seed=11)
    e = tiny_data(32, seed=12)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="bn", in_channels=1)
    train(d, e, mc, _quick_cfg(), out_dir=tmp_path)
    rows = read_history(tmp_path / "history.csv")
    assert all(r["pgd_acc"] is None for r in rows)


class _Interrupt(Exception):
    pass


def test_train_resume_bit_exact(tmp_path):
    d = tiny_data(64, seed=13)
    e = tiny_data(32, seed=14)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="bn", in_channels=1)
    full = train(d, e, mc, _quick_cfg(epochs=4), out_dir=tmp_path / "full")

    # kill the run mid-way (same config), then resume from the on-disk state
    def die_after_epoch_1(row):
        if row["epoch"] == 1:
            raise _Interrupt
    with pytest.raises(_Interrupt):
        train(d, e, mc, _quick_cfg(epochs=4), out_dir=tmp_path / "part",
              log_fn=die_after_epoch_1)
    resumed = train(d, e, mc, _quick_cfg(epochs=4), out_dir=tmp_path / "part",
                    resume=True)
    for k, v in full.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k]), k
    rows = read_history(tmp_path / "part" / "history.csv")
    assert [r["epoch"] for r in rows] == [0, 1, 2, 3]


def test_train_mbnat_updates_both_banks():
    d = tiny_data(64, seed=15)
    e = tiny_data(32, seed=16)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="mbn", in_channels=1)
    r = train(d, e, mc, _quick_cfg(method=MethodKind.MBNAT))
    site = r.model.norm_sites[0]
    cm, cv = site.bank("clean")
    am, av = site.bank("adv")
    assert cm.abs().sum() > 0 and am.abs().sum() > 0
    assert not torch.equal(cm, am) or not torch.equal(cv, av)


def test_train_method_model_mismatch_raises():
    d = tiny_data(16)
    e = tiny_data(8)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="bn", in_channels=1)
    with pytest.raises(ValueError):
        train(d, e, mc, _quick_cfg(method=MethodKind.NOFROST))


def test_train_divergence_raises():
    d = tiny_data(64, seed=17)
    e = tiny_data(16, seed=18)
    mc = ModelConfig(depth=8, width=4, num_classes=2, norm="none", in_channels=1)
    cfg = TrainConfig(method=MethodKind.ST, epochs=3, batch_size=32, lr0=1e8,
                      seed=0, attack=AttackConfig(eps=0.0, steps=0, random_init=False),
                      eval_samples=16)
    with pytest.raises(TrainingDivergedError):
        train(d, e, mc, cfg)
