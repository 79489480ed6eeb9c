import numpy as np
import pytest

import oracles
from bigamp.channels import (
    BernoulliGaussianPrior,
    GaussianMixtureLikelihood,
    GaussianPrior,
    PiawgnLikelihood,
)
from bigamp.engine import (
    ChannelSet,
    EngineState,
    Problem,
    SolverConfig,
    adapt_damping,
    compute_cost,
    init_state,
    solve,
    step,
)


def _small_problem(rng, M=6, N=3, L=5, density=0.7, noise_var=0.1):
    A = rng.standard_normal((M, N))
    X = rng.standard_normal((N, L))
    Z = A @ X
    mask = rng.random((M, L)) < density
    mask[0, 0] = True  # keep at least one observation
    Y = Z + np.sqrt(noise_var) * rng.standard_normal((M, L))
    return Problem(np.where(mask, Y, 0.0), mask, rank=N)


def _state_dict(state):
    return {"xhat": state.xhat, "nux": state.nux,
            "ahat": state.ahat, "nua": state.nua, "shat": state.shat}


# ---------------------------------------------------------------------------
# Single-iteration equivalence against the loop reference.
# ---------------------------------------------------------------------------

def test_step_matches_loop_reference_gaussian():
    rng = np.random.default_rng(101)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    state = init_state(prob, chans, rng=rng)
    for _ in range(4):
        new = step(prob, chans, state, beta=1.0)
        ref = oracles.reference_iteration(
            prob.Y, prob.mask, chans.prior_x, chans.prior_a, chans.likelihood,
            _state_dict(state), prob.var_floor, prob.var_cap)
        for key in ("nupbar", "pbar", "nup", "phat", "zhat", "nuz", "shat",
                    "nus", "nur", "rhat", "nuq", "qhat", "xhat", "nux",
                    "ahat", "nua"):
            got = getattr(new, key)
            np.testing.assert_allclose(got, ref[key], rtol=1e-10, atol=1e-12,
                                       err_msg=key)
        state = new


def test_step_matches_loop_reference_sparse_prior_mixture_noise():
    rng = np.random.default_rng(102)
    prob = _small_problem(rng, M=5, N=2, L=7, density=1.0)
    chans = ChannelSet(BernoulliGaussianPrior(0.3, 0.0, 2.0),
                       GaussianPrior(0.0, 1.0),
                       GaussianMixtureLikelihood(0.1, 0.05, 5.0))
    state = init_state(prob, chans, rng=rng, init="random")
    for _ in range(3):
        new = step(prob, chans, state, beta=1.0)
        ref = oracles.reference_iteration(
            prob.Y, prob.mask, chans.prior_x, chans.prior_a, chans.likelihood,
            _state_dict(state), prob.var_floor, prob.var_cap)
        for key in ("pbar", "phat", "shat", "nus", "rhat", "nur",
                    "qhat", "nuq", "xhat", "nux", "ahat", "nua"):
            np.testing.assert_allclose(getattr(new, key), ref[key],
                                       rtol=1e-9, atol=1e-11, err_msg=key)
        state = new


# ---------------------------------------------------------------------------
# Damping arithmetic.
# ---------------------------------------------------------------------------

def test_beta_one_fixed_equals_off_exactly():
    rng = np.random.default_rng(103)
    prob = _small_problem(rng, noise_var=0.05)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.05))
    cfg_fixed = SolverConfig(damping="fixed", beta=1.0, max_iters=25, tol=0.0)
    cfg_off = SolverConfig(damping="off", max_iters=25, tol=0.0)
    res_fixed = solve(prob, chans, cfg_fixed, rng=np.random.default_rng(7))
    res_off = solve(prob, chans, cfg_off, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(res_fixed.xhat, res_off.xhat)
    np.testing.assert_array_equal(res_fixed.ahat, res_off.ahat)
    assert res_fixed.iterations == res_off.iterations


def test_beta_zero_freezes_the_iteration():
    rng = np.random.default_rng(104)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    state = init_state(prob, chans, rng=rng)
    state = step(prob, chans, state, beta=1.0)   # one real move
    frozen1 = step(prob, chans, state, beta=0.0)
    frozen2 = step(prob, chans, frozen1, beta=0.0)
    for key in ("nupbar", "nup", "shat", "nus", "xbar", "abar",
                "xhat", "nux", "ahat", "nua", "rhat", "nur"):
        np.testing.assert_allclose(getattr(frozen2, key), getattr(frozen1, key),
                                   rtol=0, atol=0, err_msg=key)


def test_interior_beta_blends_the_spread():
    rng = np.random.default_rng(105)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    state = init_state(prob, chans, rng=rng)
    state = step(prob, chans, state, beta=1.0)
    full = step(prob, chans, state, beta=1.0)
    half = step(prob, chans, state, beta=0.5)
    raw = (state.ahat ** 2) @ state.nux + state.nua @ (state.xhat ** 2)
    np.testing.assert_allclose(half.nupbar, 0.5 * raw + 0.5 * state.nupbar,
                               rtol=1e-14)
    np.testing.assert_allclose(half.xbar, 0.5 * full.xbar + 0.5 * state.xbar,
                               rtol=1e-13, atol=1e-15)


# ---------------------------------------------------------------------------
# Cost assembly.
# ---------------------------------------------------------------------------

def test_cost_matches_reference_assembly():
    rng = np.random.default_rng(106)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    state = init_state(prob, chans, rng=rng)
    state = step(prob, chans, state, beta=1.0, want_cost=True)
    ref = oracles.bethe_cost_reference(
        prob.Y, prob.mask, chans.prior_x, chans.prior_a, chans.likelihood,
        state.rhat, state.nur, state.qhat, state.nuq,
        state.pbar, np.maximum(state.nup, 0.0))
    assert state.cost == pytest.approx(ref, rel=1e-12)


def test_cost_noise_free_keeps_only_residual_term():
    rng = np.random.default_rng(107)
    prob = _small_problem(rng, noise_var=0.0)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.0))
    state = init_state(prob, chans, rng=rng)
    state = step(prob, chans, state, beta=1.0, want_cost=True)
    expect = 0.5 * np.sum(np.where(
        prob.mask, (prob.Y - state.pbar) ** 2 + np.maximum(state.nup, 0.0), 0.0))
    assert state.cost == pytest.approx(expect, rel=1e-13)


# ---------------------------------------------------------------------------
# Step controller.
# ---------------------------------------------------------------------------

def _cfg(**kw):
    return SolverConfig(**kw)


def test_adapt_damping_first_iteration_always_accepts():
    cfg = _cfg()
    decision, beta = adapt_damping([], 123.0, 0.05, cfg)
    assert decision == "accept"
    assert beta == pytest.approx(min(0.05 * 1.1, 0.5))


def test_adapt_damping_accepts_on_cost_decrease():
    cfg = _cfg()
    decision, beta = adapt_damping([10.0, 9.0], 8.9, 0.2, cfg)
    assert decision == "accept"
    assert beta == pytest.approx(0.22)


def test_adapt_damping_growth_saturates():
    cfg = _cfg()
    _, beta = adapt_damping([10.0], 5.0, 0.49, cfg)
    assert beta == 0.5


def test_adapt_damping_retries_on_cost_increase():
    cfg = _cfg()
    decision, beta = adapt_damping([10.0, 9.0], 9.5, 0.2, cfg)
    assert decision == "retry"
    assert beta == pytest.approx(0.1)


def test_adapt_damping_window_uses_worst_recent_cost():
    cfg = _cfg(step_window=3)
    # 9.5 beats the max of the last three accepted costs (10.0)
    decision, _ = adapt_damping([8.0, 10.0, 9.0, 8.5], 9.5, 0.2, cfg)
    assert decision == "accept"
    # but with a window of one it only sees 8.5
    decision, _ = adapt_damping([8.0, 10.0, 9.0, 8.5], 9.5, 0.2, _cfg(step_window=1))
    assert decision == "retry"


def test_adapt_damping_forced_success_at_minimum_step():
    cfg = _cfg()
    decision, beta = adapt_damping([1.0], 50.0, cfg.step_min, cfg)
    assert decision == "accept"
    assert beta == pytest.approx(0.05 * 1.1)


def test_adapt_damping_floor_clamps_reduction():
    cfg = _cfg()
    decision, beta = adapt_damping([1.0], 50.0, 0.08, cfg)
    assert decision == "retry"
    assert beta == cfg.step_min  # 0.04 clamps up to 0.05


def test_adapt_damping_nonfinite_cost_retries_then_diverges():
    cfg = _cfg()
    decision, beta = adapt_damping([], np.nan, 0.4, cfg)
    assert decision == "retry"
    assert beta == pytest.approx(0.2)
    decision, _ = adapt_damping([1.0], np.inf, cfg.step_min, cfg)
    assert decision == "diverged"


def test_adapt_damping_step_tol_terminates():
    cfg = _cfg(step_tol=0.3)
    decision, _ = adapt_damping([1.0], 5.0, 0.5, cfg)
    assert decision == "floor"


# ---------------------------------------------------------------------------
# Full solves.
# ---------------------------------------------------------------------------

def test_solve_stops_immediately_with_huge_tolerance():
    rng = np.random.default_rng(108)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    cfg = SolverConfig(damping="off", tol=1e10, max_iters=100)
    res = solve(prob, chans, cfg, rng=rng)
    assert res.termination == "converged"
    assert res.iterations == 2


def test_solve_min_iters_defers_convergence():
    rng = np.random.default_rng(109)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    cfg = SolverConfig(damping="off", tol=1e10, max_iters=100, min_iters=7)
    res = solve(prob, chans, cfg, rng=rng)
    assert res.termination == "converged"
    assert res.iterations == 7


def test_solve_max_iters_termination():
    rng = np.random.default_rng(110)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    cfg = SolverConfig(damping="off", tol=0.0, max_iters=9)
    res = solve(prob, chans, cfg, rng=rng)
    assert res.termination == "max_iters"
    assert res.iterations == 9
    assert res.attempts == 9


def test_solve_recovers_rank_two_product():
    # moderate noise keeps the cost surface smooth enough that the bare
    # solver (no hyperparameter retuning, no restarts) lands reliably; the
    # sharp noise-free regimes are exercised through the application layers
    for seed in (0, 4):
        rng = np.random.default_rng(seed)
        M = L = 100
        N = 2
        A = rng.standard_normal((M, N))
        X = rng.standard_normal((N, L))
        Z = A @ X
        noise_var = 1e-2
        Y = Z + np.sqrt(noise_var) * rng.standard_normal((M, L))
        prob = Problem(Y, None, rank=N)
        chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                           PiawgnLikelihood(noise_var))
        res = solve(prob, chans, SolverConfig(), rng=rng)
        zhat = res.ahat @ res.xhat
        nmse = 10 * np.log10(np.sum((Z - zhat) ** 2) / np.sum(Z ** 2))
        assert res.termination == "converged"
        assert nmse < -30.0


def test_solve_overflow_is_not_convergence():
    # un-damped iterations on a stiff instance blow up; the relative-change
    # test must not report success just because both sums overflowed
    rng = np.random.default_rng(115)
    M = L = 40
    N = 2
    Z = rng.standard_normal((M, N)) @ rng.standard_normal((N, L))
    prob = Problem(Z, None, rank=N)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.0))
    res = solve(prob, chans, SolverConfig(damping="off", max_iters=400),
                rng=rng)
    assert res.termination in ("diverged", "max_iters")


def test_solve_adaptive_cost_trace_monotone_enough():
    # the controller enforces decrease against a sliding bar, so the final
    # accepted cost can never exceed the starting one
    rng = np.random.default_rng(112)
    prob = _small_problem(rng, M=10, N=2, L=10, density=1.0, noise_var=0.01)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.01))
    cfg = SolverConfig(max_iters=200)
    res = solve(prob, chans, cfg, rng=rng)
    assert len(res.cost_trace) == res.iterations
    assert res.cost_trace[-1] <= res.cost_trace[0]
    assert all(np.isfinite(c) for c in res.cost_trace)


def test_solve_warm_start_resumes_from_state():
    rng = np.random.default_rng(113)
    prob = _small_problem(rng)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    cfg = SolverConfig(damping="off", tol=0.0, max_iters=5)
    first = solve(prob, chans, cfg, rng=rng)
    resumed = solve(prob, chans, cfg, state=first.state)
    assert resumed.state.t == 10
    assert resumed.iterations == 5


# ---------------------------------------------------------------------------
# Construction and validation.
# ---------------------------------------------------------------------------

def test_init_state_shapes_and_inflated_variances():
    rng = np.random.default_rng(114)
    prob = Problem(np.ones((4, 6)), None, rank=2)
    chans = ChannelSet(GaussianPrior(0.0, 2.0), GaussianPrior(0.0, 1.5),
                       PiawgnLikelihood(0.1))
    st = init_state(prob, chans, rng=rng)
    assert st.xhat.shape == (2, 6) and st.ahat.shape == (4, 2)
    assert np.all(st.nux == 20.0)
    assert np.all(st.nua == 15.0)
    assert np.all(st.xhat == 0.0)          # mean-x strategy
    assert np.any(st.ahat != 0.0)
    assert np.all(st.shat == 0.0) and np.all(st.pbar == 0.0)
    np.testing.assert_array_equal(st.xbar, st.xhat)
    np.testing.assert_array_equal(st.abar, st.ahat)


def test_init_state_strategies_and_overrides():
    prob = Problem(np.ones((4, 6)), None, rank=2)
    chans = ChannelSet(GaussianPrior(1.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(0.1))
    st_rand = init_state(prob, chans, rng=5, init="random")
    assert not np.all(st_rand.xhat == 1.0)
    st_same = init_state(prob, chans, rng=5, init="random")
    np.testing.assert_array_equal(st_rand.xhat, st_same.xhat)

    x0 = np.full((2, 6), 3.0)
    a0 = np.full((4, 2), -1.0)
    st = init_state(prob, chans, rng=5, xhat0=x0, ahat0=a0)
    np.testing.assert_array_equal(st.xhat, x0)
    np.testing.assert_array_equal(st.ahat, a0)
    with pytest.raises(ValueError):
        init_state(prob, chans, rng=5, xhat0=np.ones((3, 6)))
    with pytest.raises(ValueError):
        init_state(prob, chans, rng=5, init="bogus")


def test_problem_validation_and_floors():
    with pytest.raises(ValueError):
        Problem(np.ones(3))
    with pytest.raises(ValueError):
        Problem(np.ones((2, 2)), np.ones((3, 2), bool))
    with pytest.raises(ValueError):
        Problem(np.array([[np.nan, 1.0]]), np.array([[True, True]]))
    with pytest.raises(ValueError):
        Problem(np.ones((2, 2)), None, rank=0)
    # hidden bad values are tolerated when masked off
    p = Problem(np.array([[np.inf, 2.0]]), np.array([[False, True]]), rank=1)
    assert p.Y[0, 0] == 0.0
    assert p.n_obs == 1
    assert p.fraction_observed == 0.5
    assert p.var_floor == pytest.approx(1e-12 * 4.0)
    # all-zero data falls back to unit scale
    z = Problem(np.zeros((2, 2)), None, rank=1)
    assert z.var_floor == 1e-12


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(damping="sometimes")
    with pytest.raises(ValueError):
        SolverConfig(beta=0.0)
    with pytest.raises(ValueError):
        SolverConfig(variance_mode="diag")
    assert SolverConfig().initial_beta() == 0.05
    assert SolverConfig(damping="off").initial_beta() == 1.0
    assert SolverConfig(damping="fixed", beta=0.3).initial_beta() == 0.3
    assert SolverConfig().wants_cost()
    assert not SolverConfig(damping="off").wants_cost()
    assert SolverConfig(damping="off", track_cost=True).wants_cost()


def test_engine_state_rejects_unknown_fields():
    with pytest.raises(TypeError):
        EngineState(bogus=1)


def test_compute_cost_standalone():
    prob = Problem(np.array([[1.0, 2.0]]), None, rank=1)
    chans = ChannelSet(GaussianPrior(0.0, 1.0), GaussianPrior(0.0, 1.0),
                       PiawgnLikelihood(1.0))
    rhat = np.zeros((1, 2))
    nur = np.full((1, 2), 1e30)
    qhat = np.zeros((1, 1))
    nuq = np.full((1, 1), 1e30)
    pbar = np.zeros((1, 2))
    nup = np.ones((1, 2))
    got = compute_cost(prob, chans, rhat, nur, qhat, nuq, pbar, nup)
    # an uninformative pseudo-observation leaves the posterior equal to the
    # prior, so the KL terms vanish and only the Gaussian term survives
    expect = np.sum((prob.Y ** 2 + 1.0) / 2.0 + 0.5 * np.log(2 * np.pi))
    assert got == pytest.approx(expect, rel=1e-12)
