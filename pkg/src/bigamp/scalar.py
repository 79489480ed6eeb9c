"""Reduced-cost iteration paths built on scalar variances.

The per-entry variance fields of the full engine collapse here to single
scalars, the residual and its Onsager correction live only on the observed
support, and each iteration spends three sparse products of N multiplies
per observed entry.  Three steppers share the machinery: a general form
that still calls the likelihood channel, a closed form for possibly
incomplete AWGN observations, and a fully inlined variant on top of that
for zero-mean Gaussian priors on both factors.
"""

import numpy as np
import scipy.sparse as sp

from .channels import GaussianPrior, PiawgnLikelihood, residual_transform
from .engine import SolveResult, SolverConfig, adapt_damping


class MultiplyCounter:
    """Tally of scalar multiplies (divisions included) charged to a step."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


class SparseObservations:
    """Observed entries as row-major sorted triplets with a fixed pattern.

    The index structure is built once; residual values are swapped through
    it without re-sorting.  Duplicate coordinates are rejected because the
    residual recursion assumes one value per support point.
    """

    def __init__(self, rows, cols, values, shape):
        M, L = int(shape[0]), int(shape[1])
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if not (rows.size == cols.size == values.size):
            raise ValueError("rows, cols, values must have equal length")
        if rows.size == 0:
            raise ValueError("no observed entries")
        if rows.min() < 0 or rows.max() >= M or cols.min() < 0 or cols.max() >= L:
            raise ValueError("entry index out of range")
        if not np.all(np.isfinite(values)):
            raise ValueError("observed entries must be finite")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        same = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
        if np.any(same):
            raise ValueError("duplicate entry coordinates")
        self.M, self.L = M, L
        self.rows, self.cols, self.values = rows, cols, values
        self.n_obs = int(values.size)
        self.delta = self.n_obs / (M * L)
        # csr pattern shared by every residual field
        self._indptr = np.searchsorted(rows, np.arange(M + 1))
        self._indices = cols.astype(np.int32, copy=True)
        ms = float(np.sum(values ** 2)) / self.n_obs
        scale = ms if ms > 0 else 1.0
        self.scale = scale
        self.var_floor = 1e-12 * scale
        self.var_cap = 1e12 * scale
        self.nus_cap = 1.0 / self.var_floor

    @classmethod
    def from_problem(cls, problem):
        rows, cols = np.nonzero(problem.mask)
        return cls(rows, cols, problem.Y[rows, cols], problem.shape)

    @classmethod
    def from_dense(cls, Y, mask=None):
        Y = np.asarray(Y, dtype=float)
        if mask is None:
            mask = np.ones(Y.shape, dtype=bool)
        rows, cols = np.nonzero(mask)
        return cls(rows, cols, Y[rows, cols], Y.shape)

    def _csr(self, vals):
        return sp.csr_matrix((vals, self._indices, self._indptr),
                             shape=(self.M, self.L))

    def product_at(self, ahat, xhat):
        """Values of (ahat @ xhat) on the support; N multiplies per entry."""
        return np.einsum("en,ne->e", ahat[self.rows, :], xhat[:, self.cols])

    def left_product(self, vals, xhat):
        """vals (on support) times xhat transposed: an M x N dense result."""
        return self._csr(vals) @ xhat.T

    def right_product(self, ahat, vals):
        """ahat transposed times vals (on support): an N x L dense result."""
        return (self._csr(vals).T @ ahat).T

    def dense(self):
        out = np.zeros((self.M, self.L))
        out[self.rows, self.cols] = self.values
        return out

    def mask(self):
        out = np.zeros((self.M, self.L), dtype=bool)
        out[self.rows, self.cols] = True
        return out


class ScalarState:
    """Iteration state for the scalar-variance paths.

    Factor means stay full matrices; every variance is one float.  umat and
    vmat hold the residual and its Onsager-corrected version as value
    vectors aligned with the observation support.  rhat, qhat, and phat keep
    the pseudo-observations of the most recent step for the outer tuning
    loop; the inlined path leaves them unset and posterior_stats rebuilds
    them from the fused update.
    """

    _fields = ("t", "xhat", "nux", "ahat", "nua",
               "nupbar", "nup", "nur", "nuq", "nus",
               "umat", "vmat", "shat", "rhat", "qhat", "phat",
               "u_change2", "u_norm2", "cost")

    def __init__(self, **kw):
        for name in self._fields:
            setattr(self, name, kw.pop(name, None))
        if kw:
            raise TypeError(f"unknown state fields {sorted(kw)}")

    def copy(self):
        return ScalarState(**{f: getattr(self, f) for f in self._fields})


def init_scalar_state(obs, channels, rng=None, init="random",
                      xhat0=None, ahat0=None, var_scale=1.0):
    """Fresh state for the scalar paths.

    Both factor means default to prior draws; a zero mean would leave the
    gain normalizers of the first iteration unanchored, so "mean-x" is only
    honored when the prior mean is nonzero somewhere.  Initial variances are
    var_scale times the average prior variance: matched scale by default,
    because the mean-correction terms compare variances against squared
    means and a deliberately inflated start throws that ratio off.
    """
    if init not in ("random", "mean-x"):
        raise ValueError(f"unknown init strategy {init!r}")
    rng = np.random.default_rng(rng)
    M, L, N = obs.M, obs.L, _rank_of(channels, xhat0, ahat0)
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
    elif init == "mean-x" and np.any(channels.prior_x.prior_mean((N, L)) != 0):
        xhat = channels.prior_x.prior_mean((N, L))
    else:
        xhat = channels.prior_x.draw(rng, (N, L))
    nux = var_scale * float(np.mean(channels.prior_x.prior_var((N, L))))
    nua = var_scale * float(np.mean(channels.prior_a.prior_var((M, N))))
    zero = np.zeros(obs.n_obs)
    return ScalarState(
        t=0, xhat=xhat, nux=nux, ahat=ahat, nua=nua,
        nupbar=0.0, nup=0.0, nur=None, nuq=None, nus=0.0,
        umat=zero.copy(), vmat=zero.copy(), shat=zero.copy(),
        u_change2=None, u_norm2=None, cost=None,
    )


def _rank_of(channels, xhat0, ahat0):
    if xhat0 is not None:
        return np.asarray(xhat0).shape[0]
    if ahat0 is not None:
        return np.asarray(ahat0).shape[1]
    raise ValueError("rank cannot be inferred; pass xhat0 or ahat0")


def _clip_var(value, obs):
    return min(max(value, obs.var_floor), obs.var_cap)


def _gain(N, delta, norm2, obs):
    # normalizer N / (delta * ||.||_F^2), kept finite for a vanished factor
    return N / max(delta * norm2, N / obs.var_cap)


def _scalar_cost(obs, channels, rhat, nur, qhat, nuq, uvals, nup):
    ones = np.ones(obs.n_obs, dtype=bool)
    pbar = obs.values - uvals
    lik = float(np.sum(channels.likelihood.cost(
        obs.values, ones, pbar, np.full(obs.n_obs, max(nup, 0.0)))))
    if getattr(channels.likelihood, "is_noise_free", False):
        return lik
    klx = float(np.sum(channels.prior_x.kl(rhat, nur)))
    kla = float(np.sum(channels.prior_a.kl(qhat, nuq)))
    return klx + kla + lik


def step_scalar_general(obs, channels, state, beta=1.0, want_cost=False):
    """One scalar-variance iteration with an arbitrary likelihood channel.

    The likelihood is evaluated only on the observed support; its averaged
    residual precision, scaled by the observed fraction, plays the role the
    full-support average does in the dense algorithm.  Damping blends the
    residual field and the scalar variances; factor means are not blended.
    """
    prior_x, prior_a, lik = channels.prior_x, channels.prior_a, channels.likelihood
    xhat, ahat = state.xhat, state.ahat
    N = xhat.shape[0]
    M, L, delta = obs.M, obs.L, obs.delta
    keep = 1.0 - beta

    norm_a2 = float(np.sum(ahat ** 2))
    norm_x2 = float(np.sum(xhat ** 2))
    pvals = obs.product_at(ahat, xhat)
    uvals = obs.values - pvals

    ga = _gain(N, delta, norm_a2, obs)
    gx = _gain(N, delta, norm_x2, obs)
    nupbar_raw = (state.nux / (M * ga) + state.nua / (L * gx)) * (N / delta)
    nupbar = beta * nupbar_raw + keep * state.nupbar
    nup = beta * (nupbar + N * state.nua * state.nux) + keep * state.nup
    nup_f = max(nup, obs.var_floor)

    phat = pvals - state.shat * nupbar
    zhat, nuz = lik.posterior_moments(
        obs.values, np.ones(obs.n_obs, dtype=bool), phat,
        np.full(obs.n_obs, nup_f))
    shat_raw, nus_raw = residual_transform(zhat, nuz, phat, np.full(obs.n_obs, nup_f),
                                           nus_cap=obs.nus_cap)
    shat = beta * shat_raw + keep * state.shat
    nus = beta * (delta * float(np.mean(nus_raw))) + keep * state.nus

    nur = _clip_var(N / max(nus * norm_a2, N / obs.var_cap), obs)
    rhat = xhat * (1.0 - M * N * state.nua / max(norm_a2, N / obs.var_cap)) \
        + nur * obs.right_product(ahat, shat)
    nuq = _clip_var(N / max(nus * norm_x2, N / obs.var_cap), obs)
    qhat = ahat * (1.0 - N * L * state.nux / max(norm_x2, N / obs.var_cap)) \
        + nuq * obs.left_product(shat, xhat)

    cost = None
    if want_cost:
        cost = _scalar_cost(obs, channels, rhat, nur, qhat, nuq, uvals, nup)

    xhat_new, nux_mat = prior_x.posterior_moments(rhat, nur)
    ahat_new, nua_mat = prior_a.posterior_moments(qhat, nuq)

    return ScalarState(
        t=state.t + 1, xhat=xhat_new, nux=float(np.mean(nux_mat)),
        ahat=ahat_new, nua=float(np.mean(nua_mat)),
        nupbar=nupbar, nup=nup, nur=nur, nuq=nuq, nus=nus,
        umat=uvals, vmat=state.vmat, shat=shat,
        rhat=rhat, qhat=qhat, phat=phat,
        u_change2=float(np.sum((uvals - state.umat) ** 2)),
        u_norm2=float(np.sum(uvals ** 2)),
        cost=cost,
    )


def step_scalar_piawgn(obs, channels, state, beta=1.0, want_cost=False):
    """One scalar-variance iteration specialized to incomplete AWGN data.

    The corrected residual recursion replaces the explicit scaled-residual
    field, so damping lands on it directly.  Factor means are not blended;
    each of the three support products costs N multiplies per observed
    entry.
    """
    lik = channels.likelihood
    if not isinstance(lik, PiawgnLikelihood):
        raise TypeError("step_scalar_piawgn needs the incomplete-AWGN likelihood")
    prior_x, prior_a = channels.prior_x, channels.prior_a
    xhat, ahat = state.xhat, state.ahat
    N = xhat.shape[0]
    M, L, delta = obs.M, obs.L, obs.delta
    nuw = lik.noise_var
    keep = 1.0 - beta

    norm_a2 = float(np.sum(ahat ** 2))
    norm_x2 = float(np.sum(xhat ** 2))
    ga = _gain(N, delta, norm_a2, obs)
    gx = _gain(N, delta, norm_x2, obs)

    uvals = obs.values - obs.product_at(ahat, xhat)
    nupbar_raw = (state.nux / (M * ga) + state.nua / (L * gx)) * (N / delta)
    nupbar = beta * nupbar_raw + keep * state.nupbar
    nup = beta * (nupbar + N * state.nua * state.nux) + keep * state.nup

    coef = nupbar / max(state.nup + nuw, obs.var_floor)
    vvals = beta * (uvals + coef * state.vmat) + keep * state.vmat

    total = nup + nuw
    nus = delta / max(total, obs.var_floor)
    nur = _clip_var(ga * total, obs)
    rhat = (1.0 - M * delta * state.nua * ga) * xhat \
        + ga * obs.right_product(ahat, vvals)
    nuq = _clip_var(gx * total, obs)
    qhat = (1.0 - L * delta * state.nux * gx) * ahat \
        + gx * obs.left_product(vvals, xhat)

    cost = None
    if want_cost:
        cost = _scalar_cost(obs, channels, rhat, nur, qhat, nuq, uvals, nup)

    xhat_new, nux_mat = prior_x.posterior_moments(rhat, nur)
    ahat_new, nua_mat = prior_a.posterior_moments(qhat, nuq)

    return ScalarState(
        t=state.t + 1, xhat=xhat_new, nux=float(np.mean(nux_mat)),
        ahat=ahat_new, nua=float(np.mean(nua_mat)),
        nupbar=nupbar, nup=nup, nur=nur, nuq=nuq, nus=nus,
        umat=uvals, vmat=vvals, shat=None,
        rhat=rhat, qhat=qhat, phat=obs.values - vvals,
        u_change2=float(np.sum((uvals - state.umat) ** 2)),
        u_norm2=float(np.sum(uvals ** 2)),
        cost=cost,
    )


def _require_zero_mean_gaussian(prior, which):
    if not isinstance(prior, GaussianPrior) or np.any(np.asarray(prior.mean) != 0):
        raise ValueError(f"{which} prior must be zero-mean Gaussian for the "
                         "inlined path")
    return float(np.mean(np.asarray(prior.var, dtype=float)))


def step_lite(obs, channels, state, beta=1.0, want_cost=False, counter=None):
    """The fully inlined iteration: scalar variances, incomplete AWGN data,
    zero-mean Gaussian priors on both factors.

    Identical iterates to step_scalar_piawgn under the same priors, with
    the posterior updates folded into two fused scale factors per side.  A
    counter, when given, is charged the exact multiply count: scale-factor
    fusion keeps the per-entry work at two multiplies for each factor mean
    and three sparse products plus five scalings on the support.
    """
    lik = channels.likelihood
    if not isinstance(lik, PiawgnLikelihood):
        raise TypeError("step_lite needs the incomplete-AWGN likelihood")
    nux0 = _require_zero_mean_gaussian(channels.prior_x, "coefficient")
    nua0 = _require_zero_mean_gaussian(channels.prior_a, "factor")
    xhat, ahat = state.xhat, state.ahat
    N = xhat.shape[0]
    M, L, delta = obs.M, obs.L, obs.delta
    nuw = lik.noise_var
    keep = 1.0 - beta
    n_obs = obs.n_obs

    charge = counter.add if counter is not None else (lambda n: None)

    norm_a2 = float(np.sum(ahat ** 2))
    charge(M * N)
    norm_x2 = float(np.sum(xhat ** 2))
    charge(N * L)
    ga = _gain(N, delta, norm_a2, obs)
    gx = _gain(N, delta, norm_x2, obs)
    charge(4)                     # two products and two divisions

    uvals = obs.values - obs.product_at(ahat, xhat)
    charge(N * n_obs)
    nupbar_raw = (state.nux / (M * ga) + state.nua / (L * gx)) * (N / delta)
    charge(6)
    nupbar = beta * nupbar_raw + keep * state.nupbar
    nup = beta * (nupbar + N * state.nua * state.nux) + keep * state.nup
    charge(6)

    coef = nupbar / max(state.nup + nuw, obs.var_floor)
    charge(1)
    vvals = beta * (uvals + coef * state.vmat) + keep * state.vmat
    charge(3 * n_obs)

    total = nup + nuw
    nus = delta / max(total, obs.var_floor)
    nur = _clip_var(ga * total, obs)
    nuq = _clip_var(gx * total, obs)
    charge(3)

    nux_new = 1.0 / (1.0 / nur + 1.0 / nux0)
    sx = nux_new / nur
    cx = sx * (1.0 - M * delta * state.nua * ga)
    gxv = sx * ga
    charge(9)                     # posterior gain and the two fused scales
    xhat_new = cx * xhat + gxv * obs.right_product(ahat, vvals)
    charge(N * n_obs + 2 * N * L)

    nua_new = 1.0 / (1.0 / nuq + 1.0 / nua0)
    sa = nua_new / nuq
    ca = sa * (1.0 - L * delta * state.nux * gx)
    gav = sa * gx
    charge(9)
    ahat_new = ca * ahat + gav * obs.left_product(vvals, xhat)
    charge(N * n_obs + 2 * M * N)

    u_change2 = float(np.sum((uvals - state.umat) ** 2))
    u_norm2 = float(np.sum(uvals ** 2))
    charge(2 * n_obs)

    cost = None
    if want_cost:
        cost = _lite_cost(obs, channels, uvals, nup, xhat_new, nux_new,
                          ahat_new, nua_new)

    return ScalarState(
        t=state.t + 1, xhat=xhat_new, nux=nux_new,
        ahat=ahat_new, nua=nua_new,
        nupbar=nupbar, nup=nup, nur=nur, nuq=nuq, nus=nus,
        umat=uvals, vmat=vvals, shat=None,
        u_change2=u_change2, u_norm2=u_norm2,
        cost=cost,
    )


def _lite_eligible(channels):
    return (isinstance(channels.likelihood, PiawgnLikelihood)
            and isinstance(channels.prior_x, GaussianPrior)
            and isinstance(channels.prior_a, GaussianPrior)
            and not np.any(np.asarray(channels.prior_x.mean) != 0)
            and not np.any(np.asarray(channels.prior_a.mean) != 0))


def _pick_stepper(channels, mode):
    if mode == "lite":
        return step_lite
    if mode == "piawgn":
        return step_scalar_piawgn
    if mode == "general":
        return step_scalar_general
    if mode != "auto":
        raise ValueError(f"unknown scalar mode {mode!r}")
    if _lite_eligible(channels):
        return step_lite
    if isinstance(channels.likelihood, PiawgnLikelihood):
        return step_scalar_piawgn
    return step_scalar_general


def _lite_cost(obs, channels, uvals, nup, xhat, nux, ahat, nua):
    # inlined-path cost with the prior terms in closed form
    nux0 = float(np.mean(np.asarray(channels.prior_x.var, dtype=float)))
    nua0 = float(np.mean(np.asarray(channels.prior_a.var, dtype=float)))
    lik = channels.likelihood
    resid = float(np.sum(uvals ** 2)) + obs.n_obs * nup
    if lik.is_noise_free:
        return 0.5 * resid
    klx = 0.5 * (xhat.size * (np.log(nux0 / nux) + nux / nux0 - 1.0)
                 + float(np.sum(xhat ** 2)) / nux0)
    kla = 0.5 * (ahat.size * (np.log(nua0 / nua) + nua / nua0 - 1.0)
                 + float(np.sum(ahat ** 2)) / nua0)
    out = resid / (2.0 * lik.noise_var) \
        + obs.n_obs * 0.5 * np.log(2.0 * np.pi * lik.noise_var)
    return klx + kla + out


def solve_scalar(problem, channels, config=None, rng=None, state=None,
                 init="random", xhat0=None, ahat0=None, var_scale=1.0,
                 mode="auto", rank=None, counter=None):
    """Run a scalar-variance path to convergence or exhaustion.

    problem may be a dense Problem or SparseObservations; the stepper is
    chosen per mode ("auto" takes the cheapest one the channels allow).
    Stopping tracks the relative change of the support residual and needs
    two accepted iterations before it can fire.
    """
    if config is None:
        config = SolverConfig()
    if isinstance(problem, SparseObservations):
        obs = problem
        if rank is None and state is None and xhat0 is None and ahat0 is None:
            raise ValueError("rank is needed with raw observations")
    else:
        obs = SparseObservations.from_problem(problem)
        if rank is None:
            rank = problem.rank
    stepper = _pick_stepper(channels, mode)
    rng = np.random.default_rng(rng)
    if state is None:
        if xhat0 is None and ahat0 is None and rank is not None:
            ahat0 = channels.prior_a.draw(rng, (obs.M, rank))
        state = init_scalar_state(obs, channels, rng=rng, init=init,
                                  xhat0=xhat0, ahat0=ahat0,
                                  var_scale=var_scale)
    beta = config.initial_beta()
    want_cost = config.wants_cost()
    adaptive = config.damping == "adaptive"

    cost_trace = []
    accepted = 0
    attempts = 0
    termination = "max_iters"

    extra = {}
    if counter is not None:
        if stepper is not step_lite:
            raise ValueError("multiply counting is only wired into the "
                             "inlined path")
        extra["counter"] = counter

    while attempts < config.max_iters:
        attempts += 1
        candidate = stepper(obs, channels, state, beta, want_cost=want_cost,
                            **extra)

        if adaptive:
            decision, beta = adapt_damping(cost_trace, candidate.cost, beta, config)
            if decision == "retry":
                continue
            if decision in ("floor", "diverged"):
                termination = "damping_floor" if decision == "floor" else "diverged"
                break
        else:
            finite = np.isfinite(candidate.u_norm2)
            if want_cost:
                finite = finite and np.isfinite(candidate.cost)
            if not finite:
                termination = "diverged"
                break

        state = candidate
        accepted += 1
        if want_cost:
            cost_trace.append(state.cost)

        if accepted >= max(2, config.min_iters):
            num, den = state.u_change2, state.u_norm2
            if np.isfinite(num) and np.isfinite(den) and num <= config.tol * den:
                termination = "converged"
                break

    zhat = state.ahat @ state.xhat
    return SolveResult(
        ahat=state.ahat, xhat=state.xhat, zhat=zhat,
        nux=state.nux, nua=state.nua,
        iterations=accepted, attempts=attempts, termination=termination,
        cost_trace=cost_trace, state=state, beta=beta,
    )


def scalar_variance_reduce(state):
    """Collapse the full engine's variance fields to their scalar averages.

    Returns (nux, nua, nus): the left-factor, right-factor, and residual
    precisions averaged over their whole index ranges.
    """
    return (float(np.mean(state.nux)),
            float(np.mean(state.nua)),
            float(np.mean(state.nus)))


def posterior_stats(obs, state):
    """Final-step pseudo-observations as the outer tuning loop consumes them.

    Returns (rhat, nur, qhat, nuq, phat, nup) with phat aligned to the
    observation support.  The inlined path never materializes rhat or qhat;
    for zero-mean Gaussian factors the fused mean update is invertible, so
    they are rebuilt from the posterior means and the stored variances.  The
    product pseudo-observation comes from the corrected-residual identity
    phat = y - vhat on the support.
    """
    if state.t is None or state.t < 1:
        raise ValueError("posterior stats need at least one completed step")
    if state.rhat is not None:
        rhat, qhat = state.rhat, state.qhat
    else:
        rhat = state.xhat * (state.nur / state.nux)
        qhat = state.ahat * (state.nuq / state.nua)
    phat = state.phat if state.phat is not None else obs.values - state.vmat
    return rhat, state.nur, qhat, state.nuq, phat, state.nup
