"""Damped bilinear message-passing engine.

One iteration propagates factor beliefs through the product node and back:
product-side means/variances, an Onsager-corrected prediction, likelihood
moments, scaled residuals, then pseudo-observations for each factor prior.
Damping blends the variance-bearing quantities and the factor means between
iterations; an optional controller shrinks the blend weight whenever the
surrogate cost fails to improve and re-attempts the iteration from the last
accepted state.
"""

import numpy as np

from .channels import residual_transform


class Problem:
    """Observed matrix, observation mask, and inner dimension.

    Y is kept zeroed outside the mask so likelihood evaluators can vectorize
    without hitting garbage values.  Scale-derived guards for the iteration
    live here because they depend only on the data.
    """

    def __init__(self, Y, mask=None, rank=1):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2:
            raise ValueError("Y must be a 2-d array")
        if mask is None:
            mask = np.ones(Y.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != Y.shape:
                raise ValueError("mask shape must match Y")
        if not np.all(np.isfinite(Y[mask])):
            raise ValueError("observed entries must be finite")
        if rank < 1:
            raise ValueError("rank must be at least 1")
        self.Y = np.where(mask, Y, 0.0)
        self.mask = mask
        self.rank = int(rank)
        self.M, self.L = Y.shape
        self.n_obs = int(np.count_nonzero(mask))
        ms = float(np.sum(self.Y ** 2) / max(self.n_obs, 1))
        scale = ms if ms > 0 else 1.0
        self.scale = scale
        self.var_floor = 1e-12 * scale
        self.var_cap = 1e12 * scale
        self.nus_cap = 1.0 / self.var_floor

    @property
    def shape(self):
        return self.M, self.L

    @property
    def fraction_observed(self):
        return self.n_obs / (self.M * self.L)


class ChannelSet:
    """Prior channels for both factors plus the output likelihood."""

    def __init__(self, prior_x, prior_a, likelihood):
        self.prior_x = prior_x
        self.prior_a = prior_a
        self.likelihood = likelihood

    def replace(self, prior_x=None, prior_a=None, likelihood=None):
        return ChannelSet(prior_x if prior_x is not None else self.prior_x,
                          prior_a if prior_a is not None else self.prior_a,
                          likelihood if likelihood is not None else self.likelihood)


class SolverConfig:
    """Iteration limits, stopping rule, and damping controls."""

    def __init__(self, max_iters=1500, tol=1e-8, min_iters=0,
                 damping="adaptive", beta=None,
                 step_inc=1.1, step_dec=0.5, step_min=0.05, step_max=0.5,
                 step_window=1, step_tol=-1.0,
                 variance_mode="full", track_cost=None):
        if damping not in ("adaptive", "fixed", "off"):
            raise ValueError(f"unknown damping mode {damping!r}")
        if variance_mode not in ("full", "scalar"):
            raise ValueError(f"unknown variance mode {variance_mode!r}")
        if beta is not None and not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        self.max_iters = int(max_iters)
        self.tol = float(tol)
        self.min_iters = int(min_iters)
        self.damping = damping
        self.beta = beta
        self.step_inc = float(step_inc)
        self.step_dec = float(step_dec)
        self.step_min = float(step_min)
        self.step_max = float(step_max)
        self.step_window = max(1, int(step_window))
        self.step_tol = float(step_tol)
        self.variance_mode = variance_mode
        self.track_cost = track_cost

    def initial_beta(self):
        if self.beta is not None:
            return self.beta
        return self.step_min if self.damping == "adaptive" else 1.0

    def wants_cost(self):
        if self.track_cost is not None:
            return self.track_cost
        return self.damping == "adaptive"


class EngineState:
    """Complete iteration state; step() builds a fresh one every call."""

    _fields = ("t", "xhat", "nux", "ahat", "nua", "xbar", "abar",
               "shat", "nus", "pbar", "nupbar", "nup", "phat",
               "rhat", "nur", "qhat", "nuq", "zhat", "nuz", "cost")

    def __init__(self, **kw):
        for name in self._fields:
            setattr(self, name, kw.pop(name, None))
        if kw:
            raise TypeError(f"unknown state fields {sorted(kw)}")

    def copy(self):
        return EngineState(**{f: getattr(self, f) for f in self._fields})


def init_state(problem, channels, rng=None, init="mean-x", xhat0=None, ahat0=None):
    """Starting state ahead of the first iteration.

    init picks how factor means start: "random" draws both from their priors,
    "mean-x" draws the left factor and pins the right one at its prior mean.
    Explicit xhat0/ahat0 arrays override either choice.  Initial variances are
    inflated to ten times the prior variance so early iterations stay humble
    about the means they started from.
    """
    if init not in ("random", "mean-x"):
        raise ValueError(f"unknown init strategy {init!r}")
    rng = np.random.default_rng(rng)
    M, L = problem.shape
    N = problem.rank
    if ahat0 is not None:
        ahat = np.array(ahat0, dtype=float)
        if ahat.shape != (M, N):
            raise ValueError(f"ahat0 must have shape {(M, N)}")
    else:
        ahat = channels.prior_a.draw(rng, (M, N))
    if xhat0 is not None:
        xhat = np.array(xhat0, dtype=float)
        if xhat.shape != (N, L):
            raise ValueError(f"xhat0 must have shape {(N, L)}")
    elif init == "random":
        xhat = channels.prior_x.draw(rng, (N, L))
    else:
        xhat = channels.prior_x.prior_mean((N, L))
    nux = 10.0 * channels.prior_x.prior_var((N, L))
    nua = 10.0 * channels.prior_a.prior_var((M, N))
    zero = np.zeros((M, L))
    return EngineState(
        t=0, xhat=xhat, nux=nux, ahat=ahat, nua=nua,
        xbar=xhat.copy(), abar=ahat.copy(),
        shat=zero.copy(), nus=zero.copy(),
        pbar=zero.copy(), nupbar=zero.copy(), nup=zero.copy(),
        phat=None, rhat=None, nur=None, qhat=None, nuq=None,
        zhat=None, nuz=None, cost=None,
    )


def step(problem, channels, state, beta=1.0, want_cost=False):
    """One damped iteration from an accepted state.

    beta blends each variance-bearing update with its previous value and the
    factor means with their running blends; beta = 1 reproduces the plain
    recursion exactly.  The returned state leaves the input untouched so a
    controller can re-attempt with a smaller beta.
    """
    Y, mask = problem.Y, problem.mask
    floor = problem.var_floor
    cap = problem.var_cap
    lik = channels.likelihood

    xhat, nux = state.xhat, state.nux
    ahat, nua = state.ahat, state.nua

    # product-node spread and mean, from the current (undamped) factor moments
    nupbar_raw = (ahat ** 2) @ nux + nua @ (xhat ** 2)
    pbar = ahat @ xhat
    nupbar = beta * nupbar_raw + (1.0 - beta) * state.nupbar
    nup = beta * (nupbar + nua @ nux) + (1.0 - beta) * state.nup

    # correction with the previous residual, then likelihood moments
    phat = pbar - state.shat * nupbar
    nup_f = np.maximum(nup, floor)
    zhat, nuz = lik.posterior_moments(Y, mask, phat, nup_f)
    shat_raw, nus_raw = residual_transform(zhat, nuz, phat, nup_f, problem.nus_cap)
    shat = beta * shat_raw + (1.0 - beta) * state.shat
    nus = beta * nus_raw + (1.0 - beta) * state.nus

    # blended factor means feed the pseudo-observation build
    xbar = beta * xhat + (1.0 - beta) * state.xbar
    abar = beta * ahat + (1.0 - beta) * state.abar

    abar_sq = abar ** 2
    nur = 1.0 / np.clip(abar_sq.T @ nus, 1.0 / cap, 1.0 / floor)
    rhat = xbar * (1.0 - nur * (nua.T @ nus)) + nur * (abar.T @ shat)

    xbar_sq = xbar ** 2
    nuq = 1.0 / np.clip(nus @ xbar_sq.T, 1.0 / cap, 1.0 / floor)
    qhat = abar * (1.0 - nuq * (nus @ nux.T)) + nuq * (shat @ xbar.T)

    cost = None
    if want_cost:
        cost = compute_cost(problem, channels, rhat, nur, qhat, nuq, pbar, nup)

    xhat_new, nux_new = channels.prior_x.posterior_moments(rhat, nur)
    ahat_new, nua_new = channels.prior_a.posterior_moments(qhat, nuq)

    return EngineState(
        t=state.t + 1, xhat=xhat_new, nux=nux_new, ahat=ahat_new, nua=nua_new,
        xbar=xbar, abar=abar, shat=shat, nus=nus,
        pbar=pbar, nupbar=nupbar, nup=nup, phat=phat,
        rhat=rhat, nur=nur, qhat=qhat, nuq=nuq, zhat=zhat, nuz=nuz, cost=cost,
    )


def compute_cost(problem, channels, rhat, nur, qhat, nuq, pbar, nup):
    """Surrogate objective: prior divergences plus expected negative
    log-likelihood at the current product-node belief.

    In the noise-free limit the likelihood weight dwarfs the divergences, so
    only the residual term survives (the likelihood term itself is already
    the rescaled limit)."""
    lik = channels.likelihood
    lik_term = float(np.sum(lik.cost(problem.Y, problem.mask, pbar, np.maximum(nup, 0.0))))
    if getattr(lik, "is_noise_free", False):
        return lik_term
    kl_x = float(np.sum(channels.prior_x.kl(rhat, nur)))
    kl_a = float(np.sum(channels.prior_a.kl(qhat, nuq)))
    return kl_x + kl_a + lik_term


def adapt_damping(cost_history, candidate_cost, beta, config):
    """Step-control decision for one candidate iteration.

    Returns (decision, next_beta) with decision one of "accept", "retry",
    "floor" (give up, step size exhausted), or "diverged" (cost is not finite
    and no room to back off).  A candidate beats the bar when its cost is
    below the worst of the most recent accepted window; the very first
    iteration has no bar.  A candidate evaluated already at the minimum step
    is accepted regardless, matching the usual practice for this controller.
    """
    grown = min(max(beta * config.step_inc, config.step_min), config.step_max)
    at_floor = beta <= config.step_min * (1.0 + 1e-12)
    if not np.isfinite(candidate_cost):
        if at_floor:
            return "diverged", beta
        return "retry", max(beta * config.step_dec, config.step_min)
    if not cost_history or at_floor:
        return "accept", grown
    bar = max(cost_history[-config.step_window:])
    if candidate_cost < bar:
        return "accept", grown
    shrunk = max(beta * config.step_dec, config.step_min)
    if shrunk <= config.step_tol:
        return "floor", shrunk
    return "retry", shrunk


class SolveResult:
    """Outcome of a run: factor estimates, the completed matrix posterior,
    and bookkeeping about how the iteration ended."""

    def __init__(self, ahat, xhat, zhat, nux, nua, iterations, attempts,
                 termination, cost_trace, state, beta):
        self.ahat = ahat
        self.xhat = xhat
        self.zhat = zhat
        self.nux = nux
        self.nua = nua
        self.iterations = iterations
        self.attempts = attempts
        self.termination = termination
        self.cost_trace = cost_trace
        self.state = state
        self.beta = beta

    @property
    def converged(self):
        return self.termination == "converged"

    def __repr__(self):
        return (f"SolveResult(termination={self.termination!r}, "
                f"iterations={self.iterations}, beta={self.beta:.4g})")


def solve(problem, channels, config=None, rng=None, state=None,
          init="mean-x", xhat0=None, ahat0=None):
    """Run the iteration to convergence or exhaustion.

    A provided state warm-starts the run (the step controller still starts
    fresh).  Convergence is declared when the product-node mean stops moving
    in relative squared norm; the check needs two accepted iterations before
    it can fire.
    """
    if config is None:
        config = SolverConfig()
    if state is None:
        state = init_state(problem, channels, rng=rng, init=init,
                           xhat0=xhat0, ahat0=ahat0)
    beta = config.initial_beta()
    want_cost = config.wants_cost()
    adaptive = config.damping == "adaptive"

    cost_trace = []
    accepted = 0
    attempts = 0
    termination = "max_iters"
    pbar_prev = None

    while attempts < config.max_iters:
        attempts += 1
        candidate = step(problem, channels, state, beta, want_cost=want_cost)

        if adaptive:
            decision, beta = adapt_damping(cost_trace, candidate.cost, beta, config)
            if decision == "retry":
                continue
            if decision in ("floor", "diverged"):
                termination = "damping_floor" if decision == "floor" else "diverged"
                break
        else:
            finite = np.all(np.isfinite(candidate.pbar))
            if want_cost:
                finite = finite and np.isfinite(candidate.cost)
            if not finite:
                termination = "diverged"
                break

        state = candidate
        accepted += 1
        if want_cost:
            cost_trace.append(state.cost)

        if pbar_prev is not None and accepted >= max(2, config.min_iters):
            num = float(np.sum((state.pbar - pbar_prev) ** 2))
            den = float(np.sum(state.pbar ** 2))
            # both sums overflow once pbar is large; inf <= tol*inf would
            # otherwise read as convergence on a diverging run
            if np.isfinite(num) and np.isfinite(den) and num <= config.tol * den:
                termination = "converged"
                break
        pbar_prev = state.pbar

    return SolveResult(
        ahat=state.ahat, xhat=state.xhat, zhat=state.zhat,
        nux=state.nux, nua=state.nua,
        iterations=accepted, attempts=attempts, termination=termination,
        cost_trace=cost_trace, state=state, beta=beta,
    )
