import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import info_nce_bruteforce, rel_err
from slimssl.autograd import Tape, Tensor, backward, l2_normalize, stop_gradient
from slimssl.gradient_lab import grad_ce, grad_mse_distill, grad_nce_distill
from slimssl.objectives import (
    BranchOutputs,
    ClassifierHead,
    ConfigError,
    GroupRegConfig,
    LossSpec,
    base_loss,
    check_guidelines,
    cross_entropy,
    distill_pair,
    group_coefficients,
    group_reg_penalty,
    info_nce,
    mse_distill,
    nce_distill,
    neg_cosine,
    simsiam_loss,
    us3l_total,
)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- LossSpec ------------------------------------------------------------------

def test_loss_spec_validation():
    with pytest.raises(ConfigError):
        LossSpec(temperature=0.0)
    with pytest.raises(ConfigError):
        LossSpec(distill_loss="none", head_mode="new")
    with pytest.raises(ConfigError):
        LossSpec(base_loss="L1")
    LossSpec(distill_loss="none", head_mode="none")


# -- cosine / SimSiam ----------------------------------------------------------

def test_neg_cosine_examples():
    u = Tensor([[0.0, 1.0]])
    assert neg_cosine(u, u).item() == -1.0
    assert neg_cosine(Tensor([[1.0, 0.0]]), u).item() == 0.0
    assert math.isclose(neg_cosine(Tensor([[0.6, 0.8]]), Tensor([[1.0, 0.0]])).item(), -0.6, rel_tol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_neg_cosine_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    p, z = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ref = neg_cosine(Tensor(p), Tensor(z)).data
    assert np.allclose(neg_cosine(Tensor(a * p), Tensor(b * z)).data, ref, atol=1e-12)


def test_neg_cosine_zero_row_rejected():
    with pytest.raises(ValueError):
        neg_cosine(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))


def test_simsiam_examples():
    x = Tensor([[0.3, 0.4]])
    assert math.isclose(simsiam_loss(x, x, x, x).item(), -2.0, rel_tol=1e-12)
    a, b = Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])
    assert simsiam_loss(a, b, a, b).item() == 0.0
    with pytest.raises(ValueError):
        simsiam_loss(a, Tensor([[1.0, 0, 0]]), a, b)


def test_simsiam_target_branch_receives_zero_gradient():
    rng = np.random.default_rng(0)
    p1, z1, p2, z2 = (Tensor(rng.normal(size=(5, 3)), requires_grad=True) for _ in range(4))
    with Tape():
        backward(simsiam_loss(p1, z1, p2, z2))
    assert z1.grad is None and z2.grad is None
    assert p1.grad is not None and p2.grad is not None


# -- InfoNCE -------------------------------------------------------------------

@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_info_nce_single_pair_is_zero(seed, tau):
    z = unit_rows(np.random.default_rng(seed), 2, 5)
    assert info_nce(Tensor(z[:1]), Tensor(z[1:]), tau).item() == 0.0


@pytest.mark.parametrize("n,tau", [(2, 1.0), (2, 0.5), (3, 0.5), (5, 0.2)])
def test_info_nce_matches_bruteforce(n, tau):
    rng = np.random.default_rng(n)
    z1, z2 = unit_rows(rng, n, 4), unit_rows(rng, n, 4)
    got = info_nce(Tensor(z1), Tensor(z2), tau, reduction="sum").item()
    assert math.isclose(got, info_nce_bruteforce(z1, z2, tau), rel_tol=1e-12)


def test_info_nce_decreases_with_positive_similarity():
    z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.0):
        z2 = np.array([[math.cos(angle), math.sin(angle)], [0.0, -1.0]])
        losses.append(info_nce(Tensor(z1), Tensor(z2), 1.0, reduction="none").data[0])
    assert losses == sorted(losses, reverse=True)


def test_info_nce_rejects_unnormalized():
    with pytest.raises(ValueError):
        info_nce(Tensor([[2.0, 0.0]]), Tensor([[1.0, 0.0]]))


def test_info_nce_gradient_vs_finite_differences():
    from oracles import central_fd

    rng = np.random.default_rng(3)
    raw1, raw2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

    def f(r1):
        return info_nce(l2_normalize(Tensor(r1)), l2_normalize(Tensor(raw2)), 0.5).item()

    x = Tensor(raw1, requires_grad=True)
    with Tape():
        backward(info_nce(l2_normalize(x), l2_normalize(Tensor(raw2)), 0.5))
    assert rel_err(x.grad, central_fd(f, raw1)) <= 1e-4


# -- distillation losses ---------------------------------------------------------

def test_mse_distill_examples():
    u = Tensor([[0.6, 0.8]])
    assert math.isclose(mse_distill(u, u).item(), -1.0, rel_tol=1e-12)
    assert math.isclose(mse_distill(u, Tensor([[-0.6, -0.8]])).item(), 1.0, rel_tol=1e-12)
    with pytest.raises(ValueError):
        mse_distill(u, Tensor([[1.0, 0.0, 0.0]]))


def test_mse_distill_gradient_is_negative_target():
    rng = np.random.default_rng(0)
    zs, zt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    x = Tensor(zs, requires_grad=True)
    with Tape():
        backward(mse_distill(x, Tensor(zt), reduction="sum"))
    assert np.array_equal(x.grad, -zt)


def test_nce_distill_examples():
    u = Tensor([[1.0, 0.0]])
    assert nce_distill(u, u).item() == 0.0
    two = Tensor([[1.0, 0.0], [0.0, 1.0]])
    expect = -1.0 + math.log(math.e + 1.0)
    assert math.isclose(nce_distill(u, two).item(), expect, rel_tol=1e-12)
    assert math.isclose(expect, 0.3133, abs_tol=5e-5)
    with pytest.raises(ValueError):
        nce_distill(u, Tensor(np.zeros((0, 2))))


def test_nce_distill_temperature_divides_every_product():
    rng = np.random.default_rng(1)
    zs, zt = unit_rows(rng, 1, 3), unit_rows(rng, 4, 3)
    tau = 0.3
    sims = zt @ zs[0]
    expect = -sims[0] / tau + math.log(sum(math.exp(s / tau) for s in sims))
    assert math.isclose(nce_distill(Tensor(zs), Tensor(zt), tau).item(), expect, rel_tol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_closed_form_gradients_match_autodiff(seed):
    rng = np.random.default_rng(seed)
    K, d, C = 6, 5, 4
    zs, zt = rng.normal(size=(K, d)), rng.normal(size=(K, d))
    x = Tensor(zs, requires_grad=True)
    with Tape():
        backward(nce_distill(x, Tensor(zt), reduction="sum"))
    closed = np.stack([grad_nce_distill(zs[i], zt, i)[0] for i in range(K)])
    assert rel_err(closed, x.grad) <= 1e-6
    head = ClassifierHead.random(d, C, rng)
    y = rng.integers(0, C, size=K)
    x = Tensor(zs, requires_grad=True)
    with Tape():
        backward(cross_entropy(x, head, y, reduction="sum"))
    closed = np.stack([grad_ce(zs[i], head, int(y[i])) for i in range(K)])
    assert rel_err(closed, x.grad) <= 1e-6
    assert np.array_equal(grad_mse_distill(zt[0]), -zt[0])


# -- cross entropy ---------------------------------------------------------------

def test_cross_entropy_examples():
    head = ClassifierHead(Tensor(np.zeros((3, 4))))
    assert math.isclose(cross_entropy(Tensor(np.ones((1, 3))), head, [2]).item(), math.log(4), rel_tol=1e-12)
    big = ClassifierHead(Tensor(np.array([[100.0, 0.0], [0.0, 0.0]])))
    assert cross_entropy(Tensor([[1.0, 0.0]]), big, [0]).item() < 1e-40
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.ones((1, 3))), head, [4])


# -- group regularization ----------------------------------------------------------

def test_group_multipliers_k64_g8_alpha005():
    lam = 1e-4
    c = group_coefficients(64, GroupRegConfig(lam=lam, groups=8, alpha=0.05))
    expect = [1.00, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70, 0.65]
    for g, m in enumerate(expect):
        assert np.all(c[8 * g:8 * g + 8] == lam * m)


def test_group_alpha_zero_is_constant():
    c = group_coefficients(37, GroupRegConfig(lam=3e-4, alpha=0.0))
    assert np.all(c == 3e-4)


def test_group_boundary_clamps_last_channel():
    c = group_coefficients(9, GroupRegConfig(lam=1.0, groups=8, alpha=0.05))
    # K_G = 1: channel k is in group k, except channel 8 which is clamped to group 7
    assert c[8] == c[7] == 0.65
    assert c[6] == 0.7


def test_group_config_rejects_negative_coefficients():
    with pytest.raises(ConfigError):
        GroupRegConfig(groups=8, alpha=1 / 7)
    with pytest.raises(ConfigError):
        group_coefficients(4, GroupRegConfig(groups=8))


@given(st.integers(8, 300), st.integers(1, 8), st.one_of(st.just(0.0), st.floats(1e-6, 0.14)))
def test_group_coefficients_non_increasing(K, G, alpha):
    c = group_coefficients(K, GroupRegConfig(lam=1.0, groups=G, alpha=alpha))
    assert c[0] == 1.0 and np.all(np.diff(c) <= 0) and np.all(c > 0)
    assert (np.ptp(c) == 0) == (alpha == 0 or G == 1)


def test_group_penalty_examples_and_bruteforce():
    W = np.eye(5)
    assert math.isclose(group_reg_penalty(Tensor(W), np.full(5, 0.1)).item(), 0.5, rel_tol=1e-12)
    assert group_reg_penalty(Tensor(np.zeros((3, 2))), np.ones(3)).item() == 0.0
    rng = np.random.default_rng(0)
    W, b, lam = rng.normal(size=(6, 4)), rng.normal(size=6), rng.random(6)
    brute = 0.0
    for k in range(6):
        brute += lam[k] * (sum(W[k, j] ** 2 for j in range(4)) + b[k] ** 2)
    assert math.isclose(group_reg_penalty(Tensor(W), lam, Tensor(b)).item(), brute, rel_tol=1e-12)
    with pytest.raises(ValueError):
        group_reg_penalty(Tensor(W), lam[:5])


def test_group_penalty_gradient_is_two_lambda_w():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    c = group_coefficients(8, GroupRegConfig(lam=0.5, groups=4, alpha=0.1))
    with Tape():
        backward(group_reg_penalty(W, c))
    assert np.allclose(W.grad, 2 * c[:, None] * W.data, rtol=0, atol=1e-15)


# -- guidelines -------------------------------------------------------------------

def test_guideline_examples():
    bad = check_guidelines(LossSpec("MSE", "MSE", "none", False, False))
    assert (bad.g1_base_relative, bad.g2_distill_relative, bad.g3_momentum_teacher, bad.stable) == (False,) * 4
    r = check_guidelines(LossSpec("MSE", "NCE", "none", False, False))
    assert r.g2_distill_relative and r.stable and r.satisfied_count == 1
    best = check_guidelines(LossSpec("NCE", "MSE", "new", True, True))
    assert best.g1_base_relative and best.g3_momentum_teacher and not best.g2_distill_relative


def test_guidelines_truth_table():
    for base, distill, mom in itertools.product(("MSE", "NCE"), ("none", "MSE", "NCE"), (False, True)):
        r = check_guidelines(LossSpec(base, distill, "none", mom, mom))
        flags = (base == "NCE", distill == "NCE", mom)
        assert (r.g1_base_relative, r.g2_distill_relative, r.g3_momentum_teacher) == flags
        assert r.stable == any(flags)


# -- the combined objective -------------------------------------------------------

def _branch(rng, n=3, d=4, p=True):
    z1, z2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    if not p:
        return BranchOutputs(Tensor(z1), Tensor(z2))
    return BranchOutputs(Tensor(z1), Tensor(z2), Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d))))


def test_no_subnetworks_gives_base_loss_only():
    rng = np.random.default_rng(0)
    spec = LossSpec()
    base, teacher = _branch(rng), _branch(rng, p=False)
    terms = us3l_total(base, [], teacher, spec)
    assert terms.distill is None
    assert terms.total.item() == base_loss(spec, base, teacher).item()


def test_default_spec_composes_info_nce_and_mse_terms():
    rng = np.random.default_rng(1)
    spec = LossSpec()
    base, teacher = _branch(rng), _branch(rng, p=False)
    subs = [_branch(rng, p=False), _branch(rng, p=False)]
    total = us3l_total(base, subs, teacher, spec).total.item()

    def n(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    z1, z2 = n(base.z1.data), n(base.z2.data)
    t1, t2 = n(teacher.z1.data), n(teacher.z2.data)
    nce_part = info_nce(Tensor(z1), Tensor(t2), 0.5, bank=[Tensor(t1)]).item()
    nce_part += info_nce(Tensor(z2), Tensor(t1), 0.5, bank=[Tensor(t2)]).item()
    mse_part = 0.0
    for s in subs:
        s1, s2 = n(s.z1.data), n(s.z2.data)
        mse_part += -np.mean(np.sum(s1 * t2, axis=1)) - np.mean(np.sum(s2 * t1, axis=1))
    assert math.isclose(total, nce_part + mse_part, rel_tol=1e-12)


def test_two_sub_widths_single_sample_sum_of_parts():
    rng = np.random.default_rng(2)
    spec = LossSpec(base_loss="MSE", distill_loss="MSE", head_mode="none", momentum_target_base=False,
                    momentum_target_sub=False)
    base = _branch(rng, n=1)
    subs = [_branch(rng, n=1, p=False) for _ in range(2)]
    terms = us3l_total(base, subs, None, spec)
    parts = base_loss(spec, base).item()
    for s in subs:
        parts += distill_pair(spec, s.z1, s.z2, base.z1, base.z2).item()
    assert math.isclose(terms.total.item(), parts, rel_tol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_us3l_total_is_additive_in_subnetworks(seed, n_sub):
    rng = np.random.default_rng(seed)
    spec = LossSpec()
    base, teacher = _branch(rng), _branch(rng, p=False)
    subs = [_branch(rng, p=False) for _ in range(n_sub)]
    full = us3l_total(base, subs, teacher, spec)
    drop = us3l_total(base, subs[:-1], teacher, spec)
    assert math.isclose(full.total.item() - drop.total.item(), full.per_sub[-1].item(), rel_tol=1e-9, abs_tol=1e-12)


def test_us3l_requires_teacher_for_momentum_specs():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        us3l_total(_branch(rng), [], None, LossSpec())


def test_sub_weight_scales_distillation():
    rng = np.random.default_rng(3)
    spec = LossSpec()
    base, teacher, sub = _branch(rng), _branch(rng, p=False), _branch(rng, p=False)
    a = us3l_total(base, [sub], teacher, spec)
    b = us3l_total(base, [sub], teacher, spec, sub_weight=0.5)
    assert math.isclose(b.distill.item(), 0.5 * a.distill.item(), rel_tol=1e-12)


def test_distillation_never_reaches_teacher():
    rng = np.random.default_rng(4)
    spec = LossSpec()
    base = _branch(rng)
    t1, t2 = (Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(2))
    s1, s2 = (Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(2))
    with Tape():
        backward(us3l_total(base, [BranchOutputs(s1, s2)], BranchOutputs(t1, t2), spec).distill)
    assert t1.grad is None and t2.grad is None
    assert s1.grad is not None and s2.grad is not None
