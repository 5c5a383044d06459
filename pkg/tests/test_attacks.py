"""Tests for the PGD attack machinery.

Oracles: margins are brute-forced with explicit class loops; the
expectation-over-masks gradient is checked against the closed form for a
linear model (where E[grad(X*M)*M] = (1-r) * grad exactly); single-step
degenerate PGD is recomputed by hand from the plain input gradient.
"""

import numpy as np
import pytest

from pixeldrop import attacks as A
from pixeldrop import autodiff as ad
from pixeldrop.autodiff import Tensor
from pixeldrop.models import ModelSpec, build, read_container
from pixeldrop.rng import rng_for


# -- oracles ---------------------------------------------------------------

def margin_brute_force(logits, pick, targeted):
    """Explicit loop over classes: best other logit vs the picked one."""
    out = np.empty(logits.shape[0])
    for i in range(logits.shape[0]):
        best_other = -np.inf
        for c in range(logits.shape[1]):
            if c != pick[i]:
                best_other = max(best_other, logits[i, c])
        if targeted:
            out[i] = best_other - logits[i, pick[i]]
        else:
            out[i] = logits[i, pick[i]] - best_other
    return out


class LinearModel:
    """logits_c = <A_c, x>, built purely from library ops (full-image conv)."""

    def __init__(self, a):
        self.a = Tensor(np.asarray(a, dtype=np.float32))

    def requires_grad_(self, flag):
        self.a.requires_grad = flag
        return self

    def forward(self, x, training=False):
        return ad.global_avg_pool(ad.conv2d(x, self.a, stride=1, padding=0))


def tiny_model(seed=70, classes=4, side=16):
    model = build(ModelSpec(n=1, widths=(4, 8, 16), num_classes=classes, side=side),
                  init_seed=seed)
    model.head_weight.data = rng_for(seed, "head").normal(
        size=model.head_weight.data.shape).astype(np.float32) * 0.7
    return model


# -- config validation -------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        A.AttackConfig(norm="l1")
    with pytest.raises(ValueError):
        A.AttackConfig(eps=0.0)
    with pytest.raises(ValueError):
        A.AttackConfig(norm="l2", eps=0.1, step=0.2)
    with pytest.raises(ValueError):
        A.AttackConfig(iterations=0)
    with pytest.raises(ValueError):
        A.AttackConfig(goal="targeted")
    with pytest.raises(ValueError):
        A.AttackConfig(eot_samples=-1)
    assert A.AttackConfig(goal="targeted", target=3).target == 3


def test_defaults_registry():
    cfg = A.default_config("cifar10", "l2", side=32)
    assert cfg.eps == 1.0 and cfg.step == 16 / 255 and cfg.iterations == 20
    cfg = A.default_config("gtsrb", "linf", side=32)
    assert cfg.eps == 32 / 255 and cfg.step == 4 / 255
    cfg = A.default_config("cifar10", "l0", side=32)
    assert cfg.eps == 0.03 and cfg.step == 1.0
    assert cfg.iterations == 30  # floor(0.03 * 1024)
    assert A.l0_budget_locations(0.03, 32) == 30
    with pytest.raises(ValueError):
        A.default_config("mnist", "l2", side=28)
    cfg = A.default_config("cifar10", "linf", side=32, eot_samples=10)
    assert cfg.eot_samples == 10


# -- margin loss ---------------------------------------------------------------

def test_margin_hand_case():
    z = np.array([[5.0, 0.0]])
    got = A.cw_loss(Tensor(z, dtype=np.float64), np.array([0]))
    assert float(got.data[0]) == pytest.approx(5.0)
    got_t = A.cw_loss(Tensor(z, dtype=np.float64), np.array([0]),
                      goal="targeted", target=1)
    assert float(got_t.data[0]) == pytest.approx(5.0)  # max_{c!=1} - z_1 = 5 - 0


def test_margin_sign_iff_misclassified():
    rng = rng_for(71, "sign")
    z = rng.normal(size=(64, 10)) * 3
    y = rng.integers(0, 10, size=64)
    m = A.cw_loss(Tensor(z, dtype=np.float64), y).data
    mis = z.argmax(axis=1) != y
    # margin < 0 exactly where the argmax is not the label
    np.testing.assert_array_equal(m < 0, mis)


@pytest.mark.parametrize("targeted", [False, True])
def test_margin_matches_brute_force(targeted):
    for trial in range(50):
        rng = rng_for(72, "bf", targeted, trial)
        n = int(rng.integers(1, 8))
        c = int(rng.integers(2, 12))
        z = rng.normal(size=(n, c)) * rng.uniform(0.5, 5)
        pick = rng.integers(0, c, size=n)
        if targeted:
            got = A.cw_loss(Tensor(z, dtype=np.float64), None,
                            goal="targeted", target=pick).data
        else:
            got = A.cw_loss(Tensor(z, dtype=np.float64), pick).data
        want = margin_brute_force(z, pick, targeted)
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_margin_gradient_moves_both_logits():
    z = Tensor(np.array([[1.0, 3.0, -2.0]]), dtype=np.float64, requires_grad=True)
    A.cw_loss(z, np.array([0])).sum().backward()
    np.testing.assert_allclose(z.grad, [[1.0, -1.0, 0.0]])


# -- attack gradient ---------------------------------------------------------------

def test_plain_gradient_equals_backward():
    model = tiny_model()
    rng = rng_for(73, "plain")
    x = rng.uniform(-1, 1, size=(3, 3, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 2])
    cfg = A.AttackConfig(norm="linf", eps=0.1, step=0.05, loss="ce",
                         goal="misclassify", eot_samples=0)
    got, values = A.attack_gradient(model, x, y, cfg)

    leaf = Tensor(x, requires_grad=True)
    model.requires_grad_(False)
    obj = ad.cross_entropy(model.forward(leaf, training=False), y, reduction="none")
    obj.sum().backward()
    np.testing.assert_array_equal(got, leaf.grad)
    np.testing.assert_allclose(values, obj.data, atol=0)


def test_eot_with_zero_drop_rate_equals_plain():
    model = tiny_model()
    x = rng_for(74, "x").uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32)
    y = np.array([1, 3])
    plain = A.AttackConfig(norm="linf", eps=0.1, step=0.05, eot_samples=0)
    eot = A.AttackConfig(norm="linf", eps=0.1, step=0.05, eot_samples=1,
                         eot_drop_rate=0.0)
    g0, _ = A.attack_gradient(model, x, y, plain)
    g1, _ = A.attack_gradient(model, x, y, eot)
    np.testing.assert_array_equal(g0, g1)


def test_targeted_gradient_is_negated_target_ce():
    model = tiny_model()
    x = rng_for(75, "x").uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32)
    y = np.array([0, 0])
    cfg = A.AttackConfig(norm="linf", eps=0.1, step=0.05, loss="ce",
                         goal="targeted", target=2)
    got, _ = A.attack_gradient(model, x, y, cfg)
    leaf = Tensor(x, requires_grad=True)
    obj = ad.cross_entropy(model.forward(leaf, training=False),
                           np.array([2, 2]), reduction="none")
    obj.sum().backward()
    np.testing.assert_array_equal(got, -leaf.grad)


def test_eot_linear_model_closed_form():
    # Linear 2-class model, margin objective: gradient of the objective is a
    # constant field V, so the masked-gradient expectation is (1-r)V and each
    # coordinate's Monte-Carlo mean must land within 4 sigma of it.
    rng = rng_for(76, "lin")
    side = 8
    a = rng.normal(size=(2, 3, side, side))
    model = LinearModel(a)
    v = a[0] - a[1]  # objective = -(Z_1 - Z_0) for y=1: grad = A_0 - A_1
    x = rng.uniform(-1, 1, size=(1, 3, side, side)).astype(np.float32)
    y = np.array([1])
    r = 0.9
    samples, reps = 10, 60
    total = np.zeros((3, side, side), dtype=np.float64)
    for rep in range(reps):
        cfg = A.AttackConfig(norm="l2", eps=1.0, step=0.1, loss="cw",
                             goal="misclassify", eot_samples=samples,
                             eot_drop_rate=r, seed=1000 + rep)
        g, _ = A.attack_gradient(model, x, y, cfg)
        total += g[0]
    mean = total / reps
    want = (1 - r) * v
    sigma = np.abs(v) * np.sqrt(r * (1 - r) / (samples * reps))
    bad = np.abs(mean - want) > 4 * sigma + 1e-12
    assert bad.sum() == 0, f"{bad.sum()} coordinates outside 4 sigma"


# -- step and projection ------------------------------------------------------------

def test_linf_step_hand_case():
    x = np.zeros((1, 3, 1, 1), dtype=np.float32)
    g = np.zeros_like(x)
    g[0, 0, 0, 0], g[0, 1, 0, 0], g[0, 2, 0, 0] = 2.0, -3.0, 0.5
    out = A.step_and_project("linf", x, x, g, eps=1.0, step=0.1)
    np.testing.assert_allclose(out[0, :, 0, 0], [0.1, -0.1, 0.1])


def test_l2_projection_rescales_to_eps_exactly():
    x0 = np.zeros((1, 3, 4, 4), dtype=np.float32)
    delta = rng_for(77, "d").normal(size=x0.shape).astype(np.float32)
    eps = 0.5
    delta *= 2 * eps / np.sqrt((delta.astype(np.float64) ** 2).sum())  # norm 2eps
    out = A.project("l2", x0 + delta, x0, eps)
    got = np.sqrt(((out - x0).astype(np.float64) ** 2).sum())
    assert got == pytest.approx(eps, rel=1e-6)


def test_l2_zero_gradient_keeps_iterate():
    x = rng_for(78, "x").uniform(-1, 1, size=(2, 3, 4, 4)).astype(np.float32)
    out = A.step_and_project("l2", x, x, np.zeros_like(x), eps=0.5, step=0.1)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("norm", ["l2", "linf"])
def test_projection_fuzz_feasible_and_idempotent(norm):
    for trial in range(200):
        rng = rng_for(79, "fuzz", norm, trial)
        x0 = rng.uniform(-1, 1, size=(1, 3, 5, 5)).astype(np.float32)
        x = (x0 + rng.normal(size=x0.shape) * rng.uniform(0.01, 2)).astype(np.float32)
        eps = float(rng.uniform(0.05, 1.5))
        proj = A.project(norm, x, x0, eps)
        achieved = A.measure_norm(norm, proj, x0)[0]
        assert achieved <= eps + 1e-6, f"trial {trial}: {achieved} > {eps}"
        again = A.project(norm, proj, x0, eps)
        np.testing.assert_array_equal(proj, again)


def test_l0_toy_two_pixels():
    # Two locations; gradient is larger (in channel-sum magnitude) at the
    # second: only that location may change, to the channel sign extremes.
    x = np.zeros((1, 3, 1, 2), dtype=np.float32)
    g = np.zeros_like(x)
    g[0, :, 0, 0] = [0.1, -0.1, 0.1]
    g[0, :, 0, 1] = [0.5, -0.2, 0.0]
    out = A.step_and_project("l0", x, x, g, eps=1 / 2, step=1.0)
    np.testing.assert_array_equal(out[0, :, 0, 0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(out[0, :, 0, 1], [1.0, -1.0, 1.0])
    assert A.measure_norm("l0", out, x)[0] == 1


def test_l0_skips_saturated_location():
    # The highest-gradient location already sits at the would-be extreme, so
    # the step must spend its move on the next-best location instead.
    x = np.zeros((1, 3, 1, 2), dtype=np.float32)
    x[0, :, 0, 1] = [1.0, -1.0, 1.0]
    g = np.zeros_like(x)
    g[0, :, 0, 0] = [0.1, -0.1, 0.1]
    g[0, :, 0, 1] = [0.5, -0.2, 0.1]
    out = A.step_and_project("l0", x, x.copy(), g, eps=1.0, step=1.0)
    np.testing.assert_array_equal(out[0, :, 0, 1], [1.0, -1.0, 1.0])
    np.testing.assert_array_equal(out[0, :, 0, 0], [1.0, -1.0, 1.0])


def test_l0_respects_visited_locations():
    x0 = np.zeros((1, 3, 1, 3), dtype=np.float32)
    g = np.zeros_like(x0)
    g[0, 0, 0, 0], g[0, 0, 0, 1], g[0, 0, 0, 2] = 5.0, 3.0, 1.0
    x1 = A.step_and_project("l0", x0.copy(), x0, g, eps=1.0, step=1.0)
    x2 = A.step_and_project("l0", x1, x0, g, eps=1.0, step=1.0)
    x3 = A.step_and_project("l0", x2, x0, g, eps=1.0, step=1.0)
    assert A.measure_norm("l0", x1, x0)[0] == 1
    assert A.measure_norm("l0", x2, x0)[0] == 2
    assert A.measure_norm("l0", x3, x0)[0] == 3


# -- full PGD -----------------------------------------------------------------------

def test_single_step_linf_is_sign_gradient():
    model = tiny_model()
    x = rng_for(80, "x").uniform(-0.9, 0.9, size=(2, 3, 16, 16)).astype(np.float32)
    y = np.array([0, 1])
    eps = 16 / 255
    cfg = A.AttackConfig(norm="linf", eps=eps, step=eps, iterations=1,
                         loss="ce", goal="misclassify")
    result = A.pgd(model, x, y, cfg)
    grad, _ = A.attack_gradient(model, x, y, cfg)
    want = np.clip(x + eps * np.sign(grad), -1.0, 1.0)
    np.testing.assert_array_equal(result.x_adv, want)


@pytest.mark.parametrize("norm", ["l0", "l2", "linf"])
def test_pgd_budget_and_range(norm):
    model = tiny_model()
    rng = rng_for(81, "pgd", norm)
    x = rng.uniform(-1, 1, size=(4, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 4, size=4)
    cfg = A.default_config("cifar10", norm, side=16)
    result = A.pgd(model, x, y, cfg)
    assert result.x_adv.min() >= -1.0 and result.x_adv.max() <= 1.0
    if norm == "l0":
        budget = A.l0_budget_locations(cfg.eps, 16)
        assert (result.achieved_norm <= budget).all()
    else:
        assert (result.achieved_norm <= cfg.eps + 1e-6).all()
    assert result.loss_trajectory.shape[1] == 4


def test_pgd_with_eot_and_random_start_budget():
    model = tiny_model()
    rng = rng_for(82, "pgde")
    x = rng.uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 4, size=2)
    cfg = A.AttackConfig(norm="l2", eps=0.5, step=0.125, iterations=5,
                         eot_samples=3, eot_drop_rate=0.5, random_start=True,
                         seed=9)
    result = A.pgd(model, x, y, cfg)
    assert (result.achieved_norm <= 0.5 + 1e-6).all()
    assert result.x_adv.min() >= -1.0 and result.x_adv.max() <= 1.0


def test_pgd_success_flag_matches_final_prediction():
    model = tiny_model()
    rng = rng_for(83, "succ")
    x = rng.uniform(-1, 1, size=(6, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 4, size=6)
    cfg = A.AttackConfig(norm="linf", eps=0.2, step=0.05, iterations=5, loss="cw")
    result = A.pgd(model, x, y, cfg)
    with ad.no_grad():
        pred = model.forward(Tensor(result.x_adv), training=False).data.argmax(axis=1)
    np.testing.assert_array_equal(result.success, pred != y)


def test_pgd_deterministic():
    model = tiny_model()
    rng = rng_for(84, "det")
    x = rng.uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32)
    y = np.array([0, 1])
    cfg = A.AttackConfig(norm="l2", eps=1.0, step=0.25, iterations=4,
                         eot_samples=2, eot_drop_rate=0.9, seed=5)
    r1 = A.pgd(model, x, y, cfg, ids=np.array([10, 11]))
    r2 = A.pgd(model, x, y, cfg, ids=np.array([10, 11]))
    np.testing.assert_array_equal(r1.x_adv, r2.x_adv)
    # Different image ids draw different masks.
    r3 = A.pgd(model, x, y, cfg, ids=np.array([20, 21]))
    assert not np.array_equal(r1.x_adv, r3.x_adv)


def test_pgd_rejects_out_of_range_input():
    model = tiny_model()
    x = np.full((1, 3, 16, 16), 1.5, dtype=np.float32)
    cfg = A.AttackConfig(norm="linf", eps=0.1, step=0.05)
    with pytest.raises(ValueError, match="domain"):
        A.pgd(model, x, np.array([0]), cfg)


def test_best_of_unions_success():
    r1 = A.AdversarialResult(None, None, np.array([True, False, False]), None)
    r2 = A.AdversarialResult(None, None, np.array([False, True, False]), None)
    np.testing.assert_array_equal(A.best_of([r1, r2]), [True, True, False])
    # Adding a configuration never decreases the success set.
    assert A.best_of([r1, r2]).sum() >= A.best_of([r1]).sum()


def test_export_round_trip(tmp_path):
    model = tiny_model()
    rng = rng_for(85, "exp")
    x = rng.uniform(-1, 1, size=(3, 3, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 2])
    cfg = A.AttackConfig(norm="linf", eps=0.1, step=0.05, iterations=2)
    result = A.pgd(model, x, y, cfg)
    prefix = tmp_path / "adv"
    A.export_adversarial(prefix, result, cfg, ids=np.array([5, 6, 7]),
                         x_orig=x, labels=y)

    header, tensors = read_container(f"{prefix}.bin")
    assert header["kind"] == "adversarial_batch"
    np.testing.assert_array_equal(tensors["x_adv"], result.x_adv)
    np.testing.assert_array_equal(tensors["ids"], [5.0, 6.0, 7.0])

    lines = (tmp_path / "adv.csv").read_text().strip().splitlines()
    assert lines[0] == "image_id,goal,loss,norm,achieved_norm,success"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[0] == "5" and first[1] == "misclassify" and first[3] == "linf"
