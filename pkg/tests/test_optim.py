import math

import numpy as np
import pytest

from orthocd import manifold as mf
from orthocd import optim, rnn

from oracles import central_diff, dense_basis, taylor_expm


def random_w(d, seed=0):
    return mf.random_orthogonal(d, np.random.default_rng(seed))


def make_state(d=10, seed=0, alpha=1e-2, rule=None, reorth_every=None):
    rng = np.random.default_rng(seed)
    x = {"x": rng.standard_normal((3, 3))}
    return optim.OptimizerState(
        w=random_w(d, seed + 1), x=x,
        schedule=optim.StepSchedule("fixed", alpha),
        rule=rule, rng=np.random.default_rng(seed + 2),
        reorth_every=reorth_every)


def random_grads(state, seed=0):
    rng = np.random.default_rng(seed)
    return optim.GradPack(
        w=rng.standard_normal(state.w.shape),
        x={name: rng.standard_normal(arr.shape) for name, arr in state.x.items()})


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def test_fixed_schedule_constant():
    sched = optim.StepSchedule("fixed", 3e-4)
    assert [optim.schedule_step(sched, k) for k in (0, 1, 10**6)] == [3e-4] * 3


def test_polynomial_schedule_frozen_values():
    sched = optim.StepSchedule("polynomial", 1.0, power=0.75, offset=100.0)
    # alpha0 / (1 + k/k0)^p computed independently
    for k in (0, 1, 99, 10**4):
        want = 1.0 / (1.0 + k / 100.0) ** 0.75
        assert optim.schedule_step(sched, k) == pytest.approx(want, rel=1e-15)
    assert optim.schedule_step(sched, 0) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        optim.StepSchedule("linear", 1.0)
    with pytest.raises(ValueError):
        optim.StepSchedule("fixed", 0.0)
    with pytest.raises(ValueError):
        optim.StepSchedule("fixed", float("nan"))
    with pytest.raises(ValueError):
        optim.StepSchedule("polynomial", 1.0, offset=0.0)
    with pytest.raises(ValueError):
        optim.schedule_step(optim.StepSchedule(), -1)


def test_robbins_monro_gate():
    with pytest.raises(ValueError):
        optim.StepSchedule("fixed", 1e-3, robbins_monro=True)
    with pytest.raises(ValueError):
        optim.StepSchedule("polynomial", 1e-3, power=0.5, robbins_monro=True)
    with pytest.raises(ValueError):
        optim.StepSchedule("polynomial", 1e-3, power=1.5, robbins_monro=True)
    optim.StepSchedule("polynomial", 1e-3, power=0.75, robbins_monro=True)
    optim.StepSchedule("polynomial", 1e-3, power=1.0, robbins_monro=True)
    # non-RM polynomial may use any positive power
    optim.StepSchedule("polynomial", 1e-3, power=2.0)


def test_robbins_monro_partial_sums_diverge_and_square_sums_settle():
    sched = optim.StepSchedule("polynomial", 1.0, power=0.75, offset=1.0,
                               robbins_monro=True)
    k = np.arange(2 * 10**5)
    alpha = np.array([optim.schedule_step(sched, int(i)) for i in k[:100]])
    # closed form for the rest, same expression, vectorized for speed
    alpha_all = sched.alpha0 / (1.0 + k / sched.offset) ** sched.power
    assert np.allclose(alpha_all[:100], alpha, rtol=1e-15)
    half = alpha_all[: 10**5].sum()
    assert alpha_all.sum() > 1.18 * half            # still growing (divergence)
    sq_half = (alpha_all[: 10**5] ** 2).sum()
    assert (alpha_all**2).sum() < 1.001 * sq_half   # square sum has converged


# ---------------------------------------------------------------------------
# selection rules
# ---------------------------------------------------------------------------

def test_selection_rule_validation_and_block_size():
    with pytest.raises(ValueError):
        optim.SelectionRule("best")
    with pytest.raises(ValueError):
        optim.SelectionRule("block_gs", block_fraction=0.0)
    rule = optim.SelectionRule("block_gs", block_fraction=0.005)
    assert rule.block_size(17955) == 90   # round(89.775)
    assert rule.block_size(10) == 1       # max(1, round(0.05))


def test_select_uniform_range_and_coverage():
    rng = np.random.default_rng(0)
    draws = [optim.select_uniform(rng, 3) for _ in range(600)]
    assert set(draws) == {1, 2, 3}
    rng_a = np.random.default_rng(5)
    rng_b = np.random.default_rng(5)
    assert [optim.select_uniform(rng_a, 1000) for _ in range(20)] == \
           [optim.select_uniform(rng_b, 1000) for _ in range(20)]
    with pytest.raises(ValueError):
        optim.select_uniform(rng, 0)


def test_select_gauss_southwell():
    assert optim.select_gauss_southwell(np.array([0.1, -5.0, 4.9])) == 2
    assert optim.select_gauss_southwell(np.array([-3.0, 3.0, 3.0])) == 1  # tie: smallest
    assert optim.select_gauss_southwell(np.array([0.0])) == 1
    with pytest.raises(ValueError):
        optim.select_gauss_southwell(np.array([]))


def test_select_block_gs_against_naive():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = int(rng.integers(4, 14))
        n = mf.num_coords(d)
        v = rng.standard_normal(n)
        b = int(rng.integers(1, min(n, 8) + 1))
        # naive disjoint greedy over the sorted list
        order = sorted(range(n), key=lambda i: (-abs(v[i]), i))
        used, want = set(), []
        for i0 in order:
            j, l = mf.coord_pair(i0 + 1, d)
            if j in used or l in used:
                continue
            used.update((j, l))
            want.append(i0 + 1)
            if len(want) == b:
                break
        assert optim.select_block_gs(v, b, d, disjoint=True) == want
        # non-disjoint: plain top-b
        top = [i + 1 for i in order[:b]]
        assert optim.select_block_gs(v, b, d, disjoint=False) == top


def test_select_block_gs_never_shares_columns():
    rng = np.random.default_rng(2)
    d = 9
    v = rng.standard_normal(mf.num_coords(d))
    coords = optim.select_block_gs(v, mf.num_coords(d), d, disjoint=True)
    cols = [c for i in coords for c in mf.coord_pair(i, d)]
    assert len(cols) == len(set(cols))
    assert len(coords) <= d // 2


def test_apply_block_disjoint_matches_sequential_and_expm():
    rng = np.random.default_rng(3)
    d = 8
    w = random_w(d, seed=4)
    coords = [mf.coord_index(1, 2, d), mf.coord_index(3, 7, d),
              mf.coord_index(4, 6, d)]
    thetas = [0.4, -1.1, 0.8]
    got = optim.apply_block(w, coords, thetas, disjoint=True)
    seq = w.copy()
    for i, t in zip(coords, thetas):
        seq = mf.givens_update(seq, i, t)
    assert np.allclose(got, seq, atol=1e-14)
    # commuting rotations: the dense exponential route agrees
    omega = sum(t * dense_basis(*mf.coord_pair(i, d), d)
                for i, t in zip(coords, thetas))
    assert np.allclose(got, w @ taylor_expm(omega), atol=1e-13)
    with pytest.raises(ValueError):
        optim.apply_block(w, [mf.coord_index(1, 2, d), mf.coord_index(2, 3, d)],
                          [0.1, 0.2], disjoint=True)


def test_apply_block_non_disjoint_uses_summed_direction():
    rng = np.random.default_rng(5)
    d = 6
    w = random_w(d, seed=6)
    coords = [mf.coord_index(1, 2, d), mf.coord_index(2, 3, d)]  # overlap on 2
    thetas = [0.9, -0.5]
    got = optim.apply_block(w, coords, thetas, disjoint=False)
    omega = sum(t * dense_basis(*mf.coord_pair(i, d), d)
                for i, t in zip(coords, thetas))
    assert np.allclose(got, w @ taylor_expm(omega), atol=1e-13)
    assert mf.orthogonality_defect(got) <= 1e-13


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def test_sgd_step_plain_arithmetic():
    state = make_state(d=6, alpha=0.1)
    grads = random_grads(state, seed=7)
    w0 = state.w.copy()
    x0 = state.x["x"].copy()
    optim.sgd_step(state, grads)
    assert np.allclose(state.w, w0 - 0.1 * grads.w, atol=1e-15)
    assert np.allclose(state.x["x"], x0 - 0.1 * grads.x["x"], atol=1e-15)
    assert state.k == 1


def test_srgd_step_matches_series_oracle_and_stays_on_manifold():
    state = make_state(d=7, alpha=0.05)
    grads = random_grads(state, seed=8)
    w0 = state.w.copy()
    x0 = state.x["x"].copy()
    a = w0.T @ grads.w
    skew = (a - a.T) / 2.0
    want = w0 @ taylor_expm(-0.05 * skew)
    optim.srgd_step(state, grads)
    assert np.allclose(state.w, want, atol=1e-13)
    assert mf.orthogonality_defect(state.w) <= 1e-13
    assert np.allclose(state.x["x"], x0 - 0.05 * grads.x["x"], atol=1e-15)


def test_srgd_reorthogonalizes_on_schedule(monkeypatch):
    calls = []
    real = mf.reorthogonalize
    monkeypatch.setattr(optim.manifold, "reorthogonalize",
                        lambda w: calls.append(1) or real(w))
    state = make_state(d=6, alpha=1e-3, reorth_every=3)
    grads = random_grads(state, seed=9)
    for _ in range(7):
        optim.srgd_step(state, grads)
    assert len(calls) == 2  # k = 3 and k = 6


def test_srcd_never_reorthogonalizes(monkeypatch):
    def boom(w):
        raise AssertionError("srcd must not call reorthogonalize")
    monkeypatch.setattr(optim.manifold, "reorthogonalize", boom)
    state = make_state(d=6, alpha=1e-3, rule=optim.SelectionRule("uniform"),
                       reorth_every=1)
    grads = random_grads(state, seed=10)
    for _ in range(5):
        optim.srcd_step(state, grads)
    assert state.k == 5


def test_srcd_uniform_step_semantics():
    state = make_state(d=9, alpha=0.02, rule=optim.SelectionRule("uniform"))
    grads = random_grads(state, seed=11)
    w0 = state.w.copy()
    sel_rng = np.random.default_rng(2)  # same stream the state was built with
    expect_i = optim.select_uniform(sel_rng, mf.num_coords(9))
    theta = mf.partial_derivative(w0, grads.w, expect_i)
    want = mf.givens_update(w0, expect_i, -0.02 * theta)
    optim.srcd_step(state, grads)
    assert state.last_coords == (expect_i,)
    assert np.allclose(state.w, want, atol=1e-15)
    j, l = mf.coord_pair(expect_i, 9)
    untouched = [c for c in range(9) if c not in (j - 1, l - 1)]
    assert np.array_equal(state.w[:, untouched], w0[:, untouched])


def test_srcd_gs_picks_largest_partial():
    state = make_state(d=8, alpha=0.01, rule=optim.SelectionRule("gauss_southwell"))
    grads = random_grads(state, seed=12)
    v = mf.all_partials(state.w, grads.w)
    want_i = int(np.argmax(np.abs(v))) + 1
    optim.srcd_step(state, grads)
    assert state.last_coords == (want_i,)


def test_srcd_block_gs_applies_selected_block():
    rule = optim.SelectionRule("block_gs", block_fraction=0.2)
    state = make_state(d=8, alpha=0.01, rule=rule)
    grads = random_grads(state, seed=13)
    w0 = state.w.copy()
    v = mf.all_partials(w0, grads.w)
    coords = optim.select_block_gs(v, rule.block_size(mf.num_coords(8)), 8)
    want = optim.apply_block(w0, coords, [-0.01 * v[i - 1] for i in coords])
    optim.srcd_step(state, grads)
    assert state.last_coords == tuple(coords)
    assert np.allclose(state.w, want, atol=1e-14)


def test_srcd_requires_rule_and_rng():
    state = make_state(d=6)
    with pytest.raises(ValueError):
        optim.srcd_step(state, random_grads(state))
    state = make_state(d=6, rule=optim.SelectionRule("uniform"))
    state.rng = None
    with pytest.raises(ValueError):
        optim.srcd_step(state, random_grads(state))


def test_steps_share_the_unconstrained_update():
    grads = None
    results = {}
    for name, rule, fn in (
            ("sgd", None, optim.sgd_step),
            ("srgd", None, optim.srgd_step),
            ("srcd", optim.SelectionRule("uniform"), optim.srcd_step)):
        state = make_state(d=6, seed=14, alpha=0.03, rule=rule)
        grads = random_grads(state, seed=15)
        fn(state, grads)
        results[name] = state.x["x"].copy()
    assert np.array_equal(results["sgd"], results["srgd"])
    assert np.array_equal(results["srgd"], results["srcd"])


def test_non_finite_gradients_raise():
    for fn, rule in ((optim.sgd_step, None), (optim.srgd_step, None),
                     (optim.srcd_step, optim.SelectionRule("uniform"))):
        state = make_state(d=6, rule=rule)
        bad_w = random_grads(state, seed=16)
        bad_w.w[0, 0] = np.nan
        with pytest.raises(optim.NumericError):
            fn(state, bad_w)
        bad_x = random_grads(state, seed=17)
        bad_x.x["x"][0, 0] = np.inf
        with pytest.raises(optim.NumericError):
            fn(state, bad_x)


def test_for_rnn_state_shares_parameter_memory():
    params = rnn.init_params(8, 5, 4, seed=18)
    state = optim.OptimizerState.for_rnn(params, optim.StepSchedule("fixed", 1e-3),
                                         rule=optim.SelectionRule("uniform"), seed=0)
    assert state.w is params.w
    state.x["w_in"][0, 0] = 123.0
    assert params.w_in[0, 0] == 123.0
    assert set(state.x) == {"w_in", "w_out", "b_out", "b_mod"}


# ---------------------------------------------------------------------------
# synthetic problem
# ---------------------------------------------------------------------------

def test_synthetic_problem_construction():
    prob = optim.SyntheticProblem.make(12, (4, 4), noise_std=0.0, seed=19)
    s = np.linalg.svd(prob.a, compute_uv=False)
    assert s[0] == pytest.approx(1.0)           # sigma_max = 1 by construction
    assert s[-1] == pytest.approx(0.5)
    assert prob.lipschitz == pytest.approx(1.0)
    assert np.linalg.det(prob.q) == pytest.approx(1.0)
    assert np.allclose(prob.b, prob.q @ prob.a, atol=1e-15)
    again = optim.SyntheticProblem.make(12, (4, 4), noise_std=0.0, seed=19)
    assert np.array_equal(prob.a, again.a)


def test_synthetic_minimum_is_zero():
    prob = optim.SyntheticProblem.make(10, (3, 3), seed=20)
    assert prob.loss(prob.c, prob.q) == pytest.approx(0.0, abs=1e-25)
    assert prob.grad_norm_sq(prob.c, prob.q) == pytest.approx(0.0, abs=1e-22)
    grads = prob.grads(prob.c, prob.q)
    assert np.allclose(grads.w, np.zeros_like(grads.w), atol=1e-12)
    # elsewhere the loss is positive
    x0, w0 = prob.init(seed=21)
    assert prob.loss(x0, w0) > 0.1


def test_synthetic_grads_match_finite_differences():
    prob = optim.SyntheticProblem.make(7, (3, 3), seed=22)
    x, w = prob.init(seed=23)
    grads = prob.grads(x, w)
    # X block: plain Euclidean finite differences
    for idx in ((0, 0), (1, 2), (2, 1)):
        fd = central_diff(lambda: prob.loss(x, w), x, idx)
        assert grads.x["x"][idx] == pytest.approx(fd, rel=1e-6, abs=1e-8)
    # W block: directional derivative along basis geodesics equals the
    # Riemannian partial computed from the Euclidean gradient
    v = mf.all_partials(w, grads.w)
    for i in (1, 5, mf.num_coords(7)):
        def along(t=0.0, i=i):
            return prob.loss(x, mf.givens_update(w, i, t))
        h = 1e-6
        fd = (along(h) - along(-h)) / (2 * h)
        assert v[i - 1] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_synthetic_grad_norm_matches_partials():
    prob = optim.SyntheticProblem.make(9, (4, 4), seed=24)
    x, w = prob.init(seed=25)
    grads = prob.grads(x, w)
    v = mf.all_partials(w, grads.w)
    want = float(np.sum((x - prob.c) ** 2) + v @ v)
    assert prob.grad_norm_sq(x, w) == pytest.approx(want, rel=1e-12)


def test_synthetic_noise_is_unbiased_additive():
    prob = optim.SyntheticProblem.make(6, (3, 3), noise_std=0.5, seed=26)
    x, w = prob.init(seed=27)
    clean = prob.grads(x, w)
    rng = np.random.default_rng(28)
    reps = 4000
    acc_w = np.zeros_like(clean.w)
    acc_x = np.zeros_like(clean.x["x"])
    sq_w = 0.0
    for _ in range(reps):
        g = prob.grads(x, w, rng=rng)
        acc_w += g.w
        acc_x += g.x["x"]
        sq_w += float(np.sum((g.w - clean.w) ** 2))
    se = 0.5 / math.sqrt(reps)
    assert np.all(np.abs(acc_w / reps - clean.w) < 6 * se)
    assert np.all(np.abs(acc_x / reps - clean.x["x"]) < 6 * se)
    var = sq_w / (reps * clean.w.size)
    assert var == pytest.approx(0.25, rel=0.1)  # std 0.5 per entry
    # without an rng the gradient is exact even when noise_std > 0
    assert np.array_equal(prob.grads(x, w).w, clean.w)


def test_synthetic_state_wiring():
    prob = optim.SyntheticProblem.make(8, (3, 3), seed=29)
    sched = optim.StepSchedule("polynomial", 0.5, power=0.75, offset=100.0,
                               robbins_monro=True)
    state = prob.state(sched, rule=optim.SelectionRule("uniform"), seed=30)
    assert state.reorth_every is None
    assert mf.orthogonality_defect(state.w) <= 1e-13
    assert np.linalg.det(state.w) == pytest.approx(1.0)
    x0, w0 = prob.init(seed=30)
    assert np.array_equal(state.x["x"], x0)
    assert np.array_equal(state.w, w0)
    grads = prob.grads(state.x["x"], state.w)
    before = prob.loss(state.x["x"], state.w)
    for _ in range(50):
        grads = prob.grads(state.x["x"], state.w)
        optim.srcd_step(state, grads)
    assert prob.loss(state.x["x"], state.w) < before
