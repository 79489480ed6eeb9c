"""Outer expectation-maximization loop around repeated solver runs.

Each pass runs the bilinear solver to completion under the current channel
parameters, then refreshes every tunable parameter from the final-iteration
posterior statistics, one parameter at a time in a fixed order: coefficient
prior first, factor prior second, likelihood last.  Runs after the first
warm-start from the previous iterates, so later passes are cheap.  The
module also carries the data-driven starting guesses for the matrix
completion, robust PCA, and dictionary learning setups.
"""

import copy
from collections import namedtuple

import numpy as np

from .channels import VAR_MIN, RowBlockPrior
from .engine import SolverConfig, solve
from .scalar import SparseObservations, posterior_stats, solve_scalar

DEFAULT_SNR = 100.0


class EmConfig:
    """Budget and stopping rule for the outer tuning loop."""

    def __init__(self, max_em_iters=20, em_tol=1e-3, warm_start=True,
                 nit_first_em=50):
        if max_em_iters < 1:
            raise ValueError("max_em_iters must be at least 1")
        self.max_em_iters = int(max_em_iters)
        self.em_tol = float(em_tol)
        self.warm_start = bool(warm_start)
        self.nit_first_em = int(nit_first_em)


class EmResult:
    """Tuned channels, the run they came from, and loop bookkeeping.

    em_iters counts completed parameter refits.  theta_trace holds the
    tunable-parameter vector before the first refit and after every refit,
    including one rejected by the divergence guard.
    """

    def __init__(self, channels, result, em_iters, theta_trace,
                 em_converged, diverged):
        self.channels = channels
        self.result = result
        self.em_iters = em_iters
        self.theta_trace = theta_trace
        self.em_converged = em_converged
        self.diverged = diverged

    def __repr__(self):
        return (f"EmResult(em_iters={self.em_iters}, "
                f"em_converged={self.em_converged}, "
                f"diverged={self.diverged})")


def _channel_theta(channel, prefix):
    if isinstance(channel, RowBlockPrior):
        out = []
        for i, (_, prior) in enumerate(channel.blocks):
            out.extend(_channel_theta(prior, f"{prefix}.block{i}"))
        return out
    return [(f"{prefix}.{name}", float(getattr(channel, name)))
            for name in channel.tune]


def theta_items(channels):
    """(name, value) pairs of the tunable parameters, in refit order."""
    return (_channel_theta(channels.prior_x, "prior_x")
            + _channel_theta(channels.prior_a, "prior_a")
            + _channel_theta(channels.likelihood, "likelihood"))


def theta_values(channels):
    return [value for _, value in theta_items(channels)]


def _max_rel_change(old, new):
    out = 0.0
    for a, b in zip(old, new):
        scale = max(abs(a), abs(b), 1e-300)
        out = max(out, abs(b - a) / scale)
    return out


def _usable(result):
    """A run whose final state can feed a parameter refit."""
    state = result.state
    if state is None or state.t is None or state.t < 1:
        return False
    if result.termination == "diverged":
        return False
    return bool(np.all(np.isfinite(state.xhat))
                and np.all(np.isfinite(state.ahat)))


def _refit(problem, obs, channels, result):
    """One incremental pass over every tunable channel parameter."""
    state = result.state
    if obs is not None:
        rhat, nur, qhat, nuq, phat, nup = posterior_stats(obs, state)
        y = obs.values
        mask = np.ones(obs.n_obs, dtype=bool)
        nup = np.full(obs.n_obs, max(float(nup), VAR_MIN))
    else:
        rhat, nur = state.rhat, state.nur
        qhat, nuq = state.qhat, state.nuq
        phat, nup = state.phat, state.nup
        y, mask = problem.Y, problem.mask
    return channels.replace(
        prior_x=channels.prior_x.em_update(rhat, nur),
        prior_a=channels.prior_a.em_update(qhat, nuq),
        likelihood=channels.likelihood.em_update(y, mask, phat, nup),
    )


def em_solve(problem, channels, config=None, em_config=None, rng=None,
             init=None, xhat0=None, ahat0=None, var_scale=1.0,
             mode="auto", cap_first_solve=False):
    """Alternate solver runs with channel-parameter refits.

    Stops when the largest relative parameter change drops below em_tol or
    the refit budget runs out; the returned result is the last completed
    run, whose parameters differ from the returned channels by less than
    the stopping threshold.  A diverging run ends the loop early and the
    last finite (channels, result) pair comes back with the diverged flag.

    cap_first_solve limits the first run to nit_first_em iterations; rank
    sweeps use it because their first pass runs at an inflated rank.  The
    init/xhat0/ahat0/var_scale choices shape only the first run; warm
    starts carry the iterates after that.
    """
    if config is None:
        config = SolverConfig()
    if em_config is None:
        em_config = EmConfig()
    rng = np.random.default_rng(rng)
    scalar_path = config.variance_mode == "scalar"
    obs = SparseObservations.from_problem(problem) if scalar_path else None

    def run(chans, state, cap):
        cfg = config
        if cap is not None and cap < config.max_iters:
            cfg = copy.copy(config)
            cfg.max_iters = cap
        if scalar_path:
            return solve_scalar(obs, chans, config=cfg, rng=rng, state=state,
                                init=init or "random", xhat0=xhat0,
                                ahat0=ahat0, var_scale=var_scale, mode=mode,
                                rank=problem.rank)
        return solve(problem, chans, config=cfg, rng=rng, state=state,
                     init=init or "mean-x", xhat0=xhat0, ahat0=ahat0)

    theta = theta_values(channels)
    theta_trace = [list(theta)]
    cap = em_config.nit_first_em if cap_first_solve else None
    result = run(channels, None, cap)
    if not _usable(result):
        return EmResult(channels, result, 0, theta_trace,
                        em_converged=False, diverged=True)

    em_converged = False
    diverged = False
    em_iters = 0
    for k in range(em_config.max_em_iters):
        refit = _refit(problem, obs, channels, result)
        new_theta = theta_values(refit)
        theta_trace.append(list(new_theta))
        em_iters = k + 1
        if _max_rel_change(theta, new_theta) < em_config.em_tol:
            channels, theta = refit, new_theta
            em_converged = True
            break
        if k + 1 >= em_config.max_em_iters:
            channels, theta = refit, new_theta
            break
        warm = result.state if em_config.warm_start else None
        nxt = run(refit, warm, None)
        if not _usable(nxt):
            # keep the channels that produced the last finite run, so the
            # returned pair stays self-consistent
            diverged = True
            break
        channels, theta, result = refit, new_theta, nxt

    return EmResult(channels, result, em_iters, theta_trace,
                    em_converged, diverged)


McTheta = namedtuple("McTheta", ["x_mean", "x_var", "noise_var"])
RpcaTheta = namedtuple("RpcaTheta",
                       ["x_var", "dense_var", "outlier_var", "outlier_rate"])
DlTheta = namedtuple("DlTheta", ["active_var", "noise_var", "activity"])


def init_theta_mc(Y, mask=None, rank=1, snr0=DEFAULT_SNR):
    """Starting channel parameters for matrix completion.

    Splits the observed per-entry energy between signal and noise under an
    assumed starting SNR, then spreads the signal share across the rank.
    Deterministic in (Y, mask, rank, snr0); degenerate all-zero data floors
    both variances.
    """
    Y = np.asarray(Y, dtype=float)
    if mask is None:
        mask = np.ones(Y.shape, dtype=bool)
    n_obs = int(np.count_nonzero(mask))
    if n_obs == 0:
        raise ValueError("no observed entries")
    energy = float(np.sum(np.where(mask, Y, 0.0) ** 2)) / n_obs
    noise_var = energy / (snr0 + 1.0)
    x_var = (energy - noise_var) / rank
    return McTheta(x_mean=0.0, x_var=max(x_var, VAR_MIN),
                   noise_var=max(noise_var, VAR_MIN))


def init_theta_rpca(Y, rank, snr0=DEFAULT_SNR):
    """Starting channel parameters for robust PCA on complete data.

    A median split keeps outliers out of the variance estimates: entries
    with magnitude at or below the lower median estimate the dense noise
    and the low-rank energy, the rest estimate the outlier variance.  With
    no strictly-larger entries (constant magnitudes), the outlier variance
    falls back to ten times the dense one.
    """
    y = np.abs(np.asarray(Y, dtype=float)).ravel()
    if y.size == 0:
        raise ValueError("empty observation matrix")
    med = np.sort(y)[(y.size - 1) // 2]
    small = y <= med
    dense_var = max(float(np.mean(y[small] ** 2)) / (snr0 + 1.0), VAR_MIN)
    x_var = snr0 * dense_var / rank
    if np.any(~small):
        outlier_var = float(np.mean(y[~small] ** 2))
    else:
        outlier_var = 10.0 * dense_var
    return RpcaTheta(x_var=max(x_var, VAR_MIN), dense_var=dense_var,
                     outlier_var=max(outlier_var, VAR_MIN), outlier_rate=0.1)


def init_theta_dl(Y, mask=None, rank=1, activity=0.1, snr0=DEFAULT_SNR):
    """Starting channel parameters for dictionary learning.

    Same energy split as matrix completion, except the signal share spreads
    only over the expected active coefficients per column.
    """
    if not 0.0 < activity <= 1.0:
        raise ValueError("activity must lie in (0, 1]")
    base = init_theta_mc(Y, mask=mask, rank=rank, snr0=snr0)
    return DlTheta(active_var=base.x_var / activity,
                   noise_var=base.noise_var, activity=activity)
