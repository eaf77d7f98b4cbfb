"""Attack-suite unit tests against closed-form and frozen oracles."""

import pytest
import torch
import torch.nn.functional as F

from nofrost.attacks import (
    AdversarialBatch,
    AttackConfig,
    AttackError,
    cw_margin_loss,
    fat_early_stop_pgd,
    pgd,
    project_linf,
    select_targets,
    targeted_pgd,
    trades_fat_inner_max,
    trades_inner_max,
)


class LinearBinary(torch.nn.Module):
    """z = [w.x + b, -(w.x + b)]; sign of the CE ascent direction is -sign(w)."""

    def __init__(self, w, bias=0.0):
        super().__init__()
        self.register_buffer("w", torch.as_tensor(w, dtype=torch.float32))
        self.bias = bias

    def forward(self, x):
        s = x.flatten(1) @ self.w + self.bias
        return torch.stack([s, -s], dim=1)


class ConstantLogits(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.register_buffer("logits", torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        # keep the graph connected so autograd produces (zero) input grads
        return self.logits[None, :].expand(x.shape[0], -1) + 0.0 * x.flatten(1).sum(1, keepdim=True)


def small_net(seed=0, in_ch=1, k=3):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = torch.nn.Sequential(
        torch.nn.Conv2d(in_ch, 4, 3, padding=1),
        torch.nn.ReLU(),
        torch.nn.Flatten(),
        torch.nn.Linear(4 * 8 * 8, k),
    )
    for p in net.parameters():
        with torch.no_grad():
            p.normal_(0.0, 0.2, generator=g)
    net.eval()
    return net


def test_project_linf_double_clamp():
    x_ref = torch.tensor([0.5, 0.02, 0.98])
    x_adv = torch.tensor([0.9, -0.5, 2.0])
    out = project_linf(x_adv, x_ref, eps=0.1)
    # first clamp to the ball: [0.6, -0.08, 1.08]; then to the unit box
    assert torch.allclose(out, torch.tensor([0.6, 0.0, 1.0]), atol=1e-7)


def test_project_linf_rejects_negative_eps_and_shape_mismatch():
    with pytest.raises(ValueError):
        project_linf(torch.zeros(3), torch.zeros(3), eps=-0.1)
    with pytest.raises(ValueError):
        project_linf(torch.zeros(3), torch.zeros(4), eps=0.1)


def test_cw_margin_closed_form():
    logits = torch.tensor([[2.0, -1.0, 0.5], [0.0, 1.0, -3.0]])
    y = torch.tensor([0, 0])
    m = cw_margin_loss(logits, y)
    assert m[0].item() == pytest.approx(-1.5, abs=1e-7)  # 0.5 - 2.0
    assert m[1].item() == pytest.approx(1.0, abs=1e-7)   # misclassified -> positive


def test_cw_margin_validates_shapes_and_labels():
    with pytest.raises(ValueError):
        cw_margin_loss(torch.zeros(3), torch.zeros(3, dtype=torch.long))
    with pytest.raises(ValueError):
        cw_margin_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(eps=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(steps=-1)
    with pytest.raises(ValueError):
        AttackConfig(step_size=0.0)
    with pytest.raises(ValueError):
        AttackConfig(loss_kind="mystery")
    with pytest.raises(ValueError):
        AttackConfig(loss_kind="targeted_cross_entropy", target_rule="none")
    with pytest.raises(ValueError):
        AttackConfig(target_rule="fixed")
    with pytest.raises(ValueError):
        AttackConfig(early_stop=True, loss_kind="kl_vs_reference")
    with pytest.raises(ValueError):
        AttackConfig(pixel_range=(1.0, 0.0))


def test_default_step_size_rule():
    cfg = AttackConfig(eps=8 / 255, steps=20)
    assert cfg.resolved_step_size == pytest.approx(0.00392156862745098, rel=1e-12)
    cfg2 = AttackConfig(eps=8 / 255, steps=20, step_size=0.007)
    assert cfg2.resolved_step_size == 0.007


def test_pgd_linear_model_saturates_ball():
    # Constant ascent direction: with alpha*steps = 2.5*eps the iterate hits the
    # ball boundary, so x* = x - eps * sign(w) wherever the pixel box is slack.
    w = torch.tensor([1.0, -2.0, 0.5, -0.25])
    model = LinearBinary(w)
    x = torch.full((3, 4), 0.5)
    y = torch.zeros(3, dtype=torch.long)
    cfg = AttackConfig(eps=0.1, steps=4, random_init=False)
    out = pgd(model, x, y, cfg)
    expect = 0.5 - 0.1 * torch.sign(w)
    assert torch.allclose(out.x_star, expect.expand(3, 4), atol=1e-6)
    assert torch.all(out.iterations_used == 4)


def test_momentum_matches_plain_pgd_when_direction_constant():
    # For a linear model the gradient direction never changes, so momentum
    # accumulation must land on the same attack.
    w = torch.tensor([0.3, -1.0, 2.0])
    model = LinearBinary(w)
    x = torch.full((2, 3), 0.5)
    y = torch.zeros(2, dtype=torch.long)
    plain = pgd(model, x, y, AttackConfig(eps=0.05, steps=5, random_init=False))
    mom = pgd(model, x, y, AttackConfig(eps=0.05, steps=5, random_init=False,
                                        momentum_decay=1.0))
    assert torch.allclose(plain.x_star, mom.x_star, atol=1e-7)


def test_pgd_containment_and_box():
    g = torch.Generator().manual_seed(0)
    model = small_net(seed=1)
    x = torch.rand(6, 1, 8, 8, generator=g)
    y = torch.randint(0, 3, (6,), generator=g)
    cfg = AttackConfig(eps=8 / 255, steps=10, seed=3)
    out = pgd(model, x, y, cfg)
    assert (out.x_star - x).abs().max().item() <= cfg.eps + 1e-6
    assert out.x_star.min().item() >= 0.0
    assert out.x_star.max().item() <= 1.0


def test_pgd_bitwise_repeatable_and_seed_sensitive():
    g = torch.Generator().manual_seed(4)
    model = small_net(seed=2)
    x = torch.rand(4, 1, 8, 8, generator=g)
    y = torch.randint(0, 3, (4,), generator=g)
    a = pgd(model, x, y, AttackConfig(eps=0.03, steps=5, seed=11))
    b = pgd(model, x, y, AttackConfig(eps=0.03, steps=5, seed=11))
    c = pgd(model, x, y, AttackConfig(eps=0.03, steps=5, seed=12))
    assert torch.equal(a.x_star, b.x_star)
    assert not torch.equal(a.x_star, c.x_star)


def test_eps_zero_returns_input_bitwise():
    g = torch.Generator().manual_seed(5)
    model = small_net(seed=3)
    x = torch.rand(4, 1, 8, 8, generator=g)
    y = torch.zeros(4, dtype=torch.long)
    out = pgd(model, x, y, AttackConfig(eps=0.0, steps=5))
    assert torch.equal(out.x_star, x)


def test_steps_zero_keeps_projected_init():
    g = torch.Generator().manual_seed(6)
    model = small_net(seed=4)
    x = torch.rand(4, 1, 8, 8, generator=g)
    y = torch.zeros(4, dtype=torch.long)
    out = pgd(model, x, y, AttackConfig(eps=0.05, steps=0, random_init=False))
    assert torch.equal(out.x_star, x)
    assert torch.all(out.iterations_used == 0)


def test_pgd_rejects_targeted_loss():
    model = small_net()
    with pytest.raises(ValueError):
        pgd(model, torch.rand(2, 1, 8, 8), torch.zeros(2, dtype=torch.long),
            AttackConfig(loss_kind="targeted_cross_entropy", target_rule="fixed",
                         target_class=1))


def test_select_targets_never_true_label():
    g = torch.Generator().manual_seed(7)
    y = torch.randint(0, 5, (200,), generator=g)
    cfg = AttackConfig(loss_kind="targeted_cross_entropy", target_rule="random_other")
    t = select_targets(y, 5, cfg, torch.Generator().manual_seed(1))
    assert torch.all(t != y)
    assert t.min() >= 0 and t.max() < 5
    cfg_fixed = AttackConfig(loss_kind="targeted_cross_entropy", target_rule="fixed",
                             target_class=2)
    tf = select_targets(y, 5, cfg_fixed, torch.Generator().manual_seed(1))
    assert torch.all(tf == 2)


def test_targeted_pgd_moves_toward_target():
    # Targeted CE descent on the linear model pushes x up the +w direction when
    # the target is class 0, so the target logit must strictly increase.
    w = torch.tensor([1.0, 1.0, -1.0])
    model = LinearBinary(w)
    x = torch.full((2, 3), 0.5)
    target = torch.zeros(2, dtype=torch.long)
    cfg = AttackConfig(eps=0.1, steps=4, random_init=False,
                       loss_kind="targeted_cross_entropy", target_rule="fixed",
                       target_class=0)
    out = targeted_pgd(model, x, target, cfg)
    before = model(x)[:, 0]
    after = model(out.x_star)[:, 0]
    assert torch.all(after > before)
    assert bool(out.success.all())


def test_fat_iteration_counts_closed_form():
    # Always-misclassified model: a sample flipped at step 0 runs
    # min(extra, steps) iterations.
    model = ConstantLogits([0.0, 5.0])
    x = torch.full((3, 4), 0.5)
    y = torch.zeros(3, dtype=torch.long)
    for extra, steps, want in ((1, 6, 1), (0, 6, 0), (3, 2, 2)):
        out = fat_early_stop_pgd(
            model, x, y,
            AttackConfig(eps=0.1, steps=steps, random_init=False,
                         early_stop=True, early_stop_extra_steps=extra))
        assert torch.all(out.iterations_used == want), (extra, steps)
        assert bool(out.success.all())


def test_fat_matches_pgd_when_never_misclassified():
    # Huge fixed margin: no eps-ball point flips the label, so early stop never
    # triggers and the result is bit-identical to plain PGD.
    w = torch.tensor([0.01, -0.01, 0.01, 0.01])
    model = LinearBinary(w, bias=5.0)
    g = torch.Generator().manual_seed(8)
    x = torch.rand(4, 4, generator=g)
    y = torch.zeros(4, dtype=torch.long)
    cfg = AttackConfig(eps=0.05, steps=6, seed=21)
    fat = fat_early_stop_pgd(model, x, y, cfg)
    plain = pgd(model, x, y, cfg)
    assert torch.equal(fat.x_star, plain.x_star)
    assert torch.all(fat.iterations_used == 6)
    assert not bool(fat.success.any())


def test_trades_inner_max_increases_kl():
    g = torch.Generator().manual_seed(9)
    model = small_net(seed=5)
    x = torch.rand(5, 1, 8, 8, generator=g)
    cfg = AttackConfig(eps=0.1, steps=10, loss_kind="kl_vs_reference", seed=2)
    out = trades_inner_max(model, x, cfg)
    with torch.no_grad():
        p_ref = F.softmax(model(x), dim=1)
        kl_adv = F.kl_div(F.log_softmax(model(out.x_star), dim=1), p_ref,
                          reduction="batchmean")
        noise = project_linf(x + 0.1 * torch.sign(torch.randn(x.shape, generator=g)),
                             x, 0.1)
        kl_noise = F.kl_div(F.log_softmax(model(noise), dim=1), p_ref,
                            reduction="batchmean")
    assert kl_adv.item() > kl_noise.item()


def test_trades_success_is_reference_disagreement():
    model = small_net(seed=6)
    g = torch.Generator().manual_seed(10)
    x = torch.rand(8, 1, 8, 8, generator=g)
    cfg = AttackConfig(eps=0.2, steps=10, loss_kind="kl_vs_reference")
    out = trades_inner_max(model, x, cfg)
    with torch.no_grad():
        ref = model(x).argmax(1)
        adv = model(out.x_star).argmax(1)
    assert torch.equal(out.success, ref != adv)


def test_trades_fat_variant_runs_and_contains():
    model = small_net(seed=7)
    g = torch.Generator().manual_seed(11)
    x = torch.rand(6, 1, 8, 8, generator=g)
    y = torch.randint(0, 3, (6,), generator=g)
    cfg = AttackConfig(eps=0.05, steps=8, loss_kind="kl_vs_reference")
    out = trades_fat_inner_max(model, x, y, cfg)
    assert (out.x_star - x).abs().max().item() <= cfg.eps + 1e-6
    assert torch.all(out.iterations_used <= 8)


def test_nonfinite_gradient_raises():
    class NaNNet(torch.nn.Module):
        def forward(self, x):
            s = x.flatten(1).sum(1, keepdim=True)
            return torch.cat([s * float("nan"), s], dim=1)

    with pytest.raises(AttackError):
        pgd(NaNNet(), torch.rand(2, 3), torch.zeros(2, dtype=torch.long),
            AttackConfig(eps=0.1, steps=2, random_init=False))


def test_adversarial_batch_fields():
    model = small_net(seed=8)
    x = torch.rand(3, 1, 8, 8)
    y = torch.zeros(3, dtype=torch.long)
    out = pgd(model, x, y, AttackConfig(eps=0.02, steps=3))
    assert isinstance(out, AdversarialBatch)
    assert out.iterations_used.dtype == torch.long
    assert out.success.dtype == torch.bool
    assert out.x_star.shape == x.shape
