"""Scalar prior and likelihood channels.

Each prior channel turns a Gaussian pseudo-observation (rhat, nur) into
posterior moments of the underlying coefficient, and each likelihood channel
turns (phat, nup) plus a data value into posterior moments of the noiseless
product entry z.  All evaluators are pure functions of their inputs and
broadcast over numpy arrays; parameter objects are never mutated during a
solve (EM builds replacements via em_update).
"""

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, xlogy

# Bounds used when EM re-estimates channel parameters.
VAR_MIN = 1e-14
RATE_MIN = 1e-6
RATE_MAX = 1.0 - 1e-6

_LOG_2PI = np.log(2.0 * np.pi)


def _as_float(x):
    return np.asarray(x, dtype=float)


def gaussian_product_moments(mean0, var0, rhat, nur):
    """Moments of the normalized product N(x; mean0, var0) * N(x; rhat, nur).

    var0 = 0 denotes a point mass, for which the observation is ignored.
    """
    mean0, var0, rhat, nur = np.broadcast_arrays(
        _as_float(mean0), _as_float(var0), _as_float(rhat), _as_float(nur))
    denom = var0 + nur
    gain = var0 / denom
    # shifted form keeps var0 = 0 exact instead of merely close
    post_var = gain * nur
    post_mean = mean0 + gain * (rhat - mean0)
    return post_mean, post_var


def _log_normal_pdf(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def gaussian_kl(mean_q, var_q, mean_p, var_p):
    """KL( N(mean_q, var_q) || N(mean_p, var_p) ), elementwise.

    Degenerate var_p = 0 is defined as 0 (both sides collapse to the same
    point mass whenever the channel produced the posterior).
    """
    mean_q, var_q, mean_p, var_p = np.broadcast_arrays(
        _as_float(mean_q), _as_float(var_q), _as_float(mean_p), _as_float(var_p))
    out = np.zeros(mean_q.shape)
    ok = var_p > 0
    vq = var_q[ok]
    vp = var_p[ok]
    dm = mean_q[ok] - mean_p[ok]
    with np.errstate(divide="ignore"):
        log_ratio = np.where(vq > 0, np.log(vp / np.maximum(vq, 1e-300)), np.inf)
    # 0*log(0) limit: a point-mass posterior has -inf differential entropy,
    # but the cost only ever sees posteriors with vq > 0 through flooring.
    out[ok] = 0.5 * (log_ratio + (vq + dm ** 2) / vp - 1.0)
    return out.reshape(mean_q.shape)


class GaussianPrior:
    """iid Gaussian prior, optionally degenerate (variance 0 = point mass).

    mean/var may be scalars or arrays broadcastable against the
    pseudo-observation; the degenerate entries pin the posterior to the
    prior mean regardless of the observation (used for the known block of
    the augmented robust-PCA factor).
    """

    def __init__(self, mean=0.0, var=1.0, tune=()):
        self.mean = mean
        self.var = var
        self.tune = tuple(tune)

    def __repr__(self):
        return f"GaussianPrior(mean={self.mean!r}, var={self.var!r})"

    def posterior_moments(self, rhat, nur):
        return gaussian_product_moments(self.mean, self.var, rhat, nur)

    def kl(self, rhat, nur):
        m, v = self.posterior_moments(rhat, nur)
        return gaussian_kl(m, v, self.mean, self.var)

    def em_update(self, rhat, nur):
        """One incremental EM pass over the tunable fields, mean before var."""
        xhat, nux = self.posterior_moments(rhat, nur)
        mean = self.mean
        var = self.var
        if "mean" in self.tune:
            mean = float(np.mean(xhat))
        if "var" in self.tune:
            var = float(np.mean((xhat - mean) ** 2 + nux))
            var = max(var, VAR_MIN)
        return GaussianPrior(mean, var, self.tune)

    def draw(self, rng, shape):
        mean = np.broadcast_to(_as_float(self.mean), shape)
        var = np.broadcast_to(_as_float(self.var), shape)
        return mean + np.sqrt(var) * rng.standard_normal(shape)

    def prior_mean(self, shape):
        return np.broadcast_to(_as_float(self.mean), shape).copy()

    def prior_var(self, shape):
        return np.broadcast_to(_as_float(self.var), shape).copy()


class BernoulliGaussianPrior:
    """Spike-and-slab prior (1 - rate)*delta(x) + rate*N(x; active_mean, active_var)."""

    def __init__(self, rate, active_mean=0.0, active_var=1.0, tune=()):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"rate must lie in [0, 1], got {rate}")
        if active_var <= 0:
            raise ValueError("active_var must be positive")
        self.rate = rate
        self.active_mean = active_mean
        self.active_var = active_var
        self.tune = tuple(tune)

    def __repr__(self):
        return (f"BernoulliGaussianPrior(rate={self.rate!r}, "
                f"active_mean={self.active_mean!r}, active_var={self.active_var!r})")

    def _split(self, rhat, nur):
        """Support probability plus slab posterior moments."""
        rhat, nur = np.broadcast_arrays(_as_float(rhat), _as_float(nur))
        slab_mean, slab_var = gaussian_product_moments(
            self.active_mean, self.active_var, rhat, nur)
        with np.errstate(divide="ignore", over="ignore"):
            log_w0 = np.log(1.0 - self.rate) + _log_normal_pdf(rhat, 0.0, nur)
            log_w1 = np.log(self.rate) + _log_normal_pdf(
                rhat, self.active_mean, self.active_var + nur)
            pi = 1.0 / (1.0 + np.exp(log_w0 - log_w1))
        return pi, slab_mean, slab_var

    def support_probability(self, rhat, nur):
        return self._split(rhat, nur)[0]

    def posterior_moments(self, rhat, nur):
        pi, m, v = self._split(rhat, nur)
        mean = pi * m
        second = pi * (v + m ** 2)
        return mean, second - mean ** 2

    def kl(self, rhat, nur):
        # Posterior is again spike-and-slab; the divergence splits into the
        # Bernoulli part plus the slab-conditional Gaussian part.
        pi, m, v = self._split(rhat, nur)
        bern = (xlogy(pi, pi) - xlogy(pi, self.rate)
                + xlogy(1.0 - pi, 1.0 - pi) - xlogy(1.0 - pi, 1.0 - self.rate))
        slab = pi * gaussian_kl(m, v, self.active_mean, self.active_var)
        return bern + slab

    def em_update(self, rhat, nur):
        pi, m, v = self._split(rhat, nur)
        rate = self.rate
        active_mean = self.active_mean
        active_var = self.active_var
        if "rate" in self.tune:
            rate = float(np.clip(np.mean(pi), RATE_MIN, RATE_MAX))
        weight = max(float(np.sum(pi)), 1e-300)
        if "active_mean" in self.tune:
            active_mean = float(np.sum(pi * m) / weight)
        if "active_var" in self.tune:
            active_var = float(np.sum(pi * (v + (m - active_mean) ** 2)) / weight)
            active_var = max(active_var, VAR_MIN)
        return BernoulliGaussianPrior(rate, active_mean, active_var, self.tune)

    def draw(self, rng, shape):
        on = rng.random(shape) < self.rate
        vals = self.active_mean + np.sqrt(self.active_var) * rng.standard_normal(shape)
        return np.where(on, vals, 0.0)

    def prior_mean(self, shape):
        return np.full(shape, self.rate * self.active_mean)

    def prior_var(self, shape):
        second = self.rate * (self.active_var + self.active_mean ** 2)
        return np.full(shape, second - (self.rate * self.active_mean) ** 2)


class RowBlockPrior:
    """Stack of priors applied to contiguous row blocks of a factor matrix.

    blocks is a list of (rows, prior) pairs; row counts must sum to the full
    factor height.  Used by the augmented robust-PCA formulation, whose
    coefficient matrix mixes Gaussian low-rank rows with Bernoulli-Gaussian
    outlier rows.
    """

    def __init__(self, blocks):
        self.blocks = [(int(n), p) for n, p in blocks]
        if any(n <= 0 for n, _ in self.blocks):
            raise ValueError("all blocks need at least one row")

    @property
    def tune(self):
        return tuple(f for _, p in self.blocks for f in p.tune)

    def _slices(self):
        start = 0
        for n, prior in self.blocks:
            yield slice(start, start + n), prior
            start += n

    def _apply(self, fn, *mats):
        outs = None
        for sl, prior in self._slices():
            res = fn(prior, *(np.asarray(m)[sl] for m in mats))
            if not isinstance(res, tuple):
                res = (res,)
            if outs is None:
                outs = [np.empty(np.asarray(mats[0]).shape) for _ in res]
            for o, r in zip(outs, res):
                o[sl] = r
        return outs[0] if len(outs) == 1 else tuple(outs)

    def posterior_moments(self, rhat, nur):
        rhat, nur = np.broadcast_arrays(_as_float(rhat), _as_float(nur))
        return self._apply(lambda p, r, v: p.posterior_moments(r, v), rhat, nur)

    def kl(self, rhat, nur):
        rhat, nur = np.broadcast_arrays(_as_float(rhat), _as_float(nur))
        return self._apply(lambda p, r, v: p.kl(r, v), rhat, nur)

    def em_update(self, rhat, nur):
        rhat, nur = np.broadcast_arrays(_as_float(rhat), _as_float(nur))
        new_blocks = []
        for sl, prior in self._slices():
            new_blocks.append((sl.stop - sl.start, prior.em_update(rhat[sl], nur[sl])))
        return RowBlockPrior(new_blocks)

    def draw(self, rng, shape):
        out = np.empty(shape)
        for sl, prior in self._slices():
            out[sl] = prior.draw(rng, out[sl].shape)
        return out

    def prior_mean(self, shape):
        out = np.empty(shape)
        for sl, prior in self._slices():
            out[sl] = prior.prior_mean(out[sl].shape)
        return out

    def prior_var(self, shape):
        out = np.empty(shape)
        for sl, prior in self._slices():
            out[sl] = prior.prior_var(out[sl].shape)
        return out


class PiawgnLikelihood:
    """Possibly incomplete additive white Gaussian noise.

    Observed entries see y = z + N(0, noise_var); unobserved entries carry no
    information, so their z-posterior is exactly the incoming (phat, nup).
    noise_var = 0 is the noise-free mode: observed posteriors collapse onto
    the data and the cost keeps only the residual term.
    """

    def __init__(self, noise_var, tune=()):
        if noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        self.noise_var = noise_var
        self.tune = tuple(tune)

    def __repr__(self):
        return f"PiawgnLikelihood(noise_var={self.noise_var!r})"

    @property
    def is_noise_free(self):
        return self.noise_var == 0.0

    def posterior_moments(self, y, mask, phat, nup):
        y, phat, nup = np.broadcast_arrays(_as_float(y), _as_float(phat), _as_float(nup))
        total = nup + self.noise_var
        gain = nup / total
        zhat = np.where(mask, phat + gain * (y - phat), phat)
        nuz = np.where(mask, gain * self.noise_var, nup)
        return zhat, nuz

    def cost(self, y, mask, pbar, nup):
        """Per-entry -E[log p(y|z)] under z ~ N(pbar, nup); 0 when unobserved."""
        y, pbar, nup = np.broadcast_arrays(_as_float(y), _as_float(pbar), _as_float(nup))
        resid = (y - pbar) ** 2 + nup
        if self.is_noise_free:
            term = 0.5 * resid
        else:
            term = resid / (2.0 * self.noise_var) + 0.5 * np.log(2.0 * np.pi * self.noise_var)
        return np.where(mask, term, 0.0)

    def em_update(self, y, mask, phat, nup):
        if "noise_var" not in self.tune:
            return self
        nobs = int(np.count_nonzero(mask))
        if nobs == 0:
            return self
        zhat, nuz = self.posterior_moments(y, mask, phat, nup)
        val = np.sum(np.where(mask, (np.asarray(y) - zhat) ** 2 + nuz, 0.0)) / nobs
        return PiawgnLikelihood(max(float(val), VAR_MIN), self.tune)


class GaussianMixtureLikelihood:
    """Two-component Gaussian noise: dense N(0, nu0) plus outliers N(0, nu0 + nu1)."""

    def __init__(self, rate, nu0, nu1, tune=()):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"outlier rate must lie in [0, 1], got {rate}")
        if nu0 < 0 or nu1 <= 0:
            raise ValueError("need nu0 >= 0 and nu1 > 0")
        self.rate = rate
        self.nu0 = nu0
        self.nu1 = nu1
        self.tune = tuple(tune)

    def __repr__(self):
        return (f"GaussianMixtureLikelihood(rate={self.rate!r}, "
                f"nu0={self.nu0!r}, nu1={self.nu1!r})")

    def _components(self, y, phat, nup):
        """Responsibilities and per-component conjugate posterior moments."""
        psi0 = self.nu0
        psi1 = self.nu0 + self.nu1
        m0, v0 = _awgn_moments(y, phat, nup, psi0)
        m1, v1 = _awgn_moments(y, phat, nup, psi1)
        with np.errstate(divide="ignore", over="ignore"):
            log_w0 = np.log(1.0 - self.rate) + _log_normal_pdf(y, phat, psi0 + nup)
            log_w1 = np.log(self.rate) + _log_normal_pdf(y, phat, psi1 + nup)
            rho = 1.0 / (1.0 + np.exp(log_w0 - log_w1))
        return rho, m0, v0, m1, v1

    def outlier_responsibility(self, y, mask, phat, nup):
        y, phat, nup = np.broadcast_arrays(_as_float(y), _as_float(phat), _as_float(nup))
        rho = self._components(y, phat, nup)[0]
        return np.where(mask, rho, 0.0)

    def posterior_moments(self, y, mask, phat, nup):
        y, phat, nup = np.broadcast_arrays(_as_float(y), _as_float(phat), _as_float(nup))
        rho, m0, v0, m1, v1 = self._components(y, phat, nup)
        mean = (1.0 - rho) * m0 + rho * m1
        var = ((1.0 - rho) * v0 + rho * v1
               + rho * (1.0 - rho) * (m1 - m0) ** 2)
        zhat = np.where(mask, mean, phat)
        nuz = np.where(mask, var, nup)
        return zhat, nuz

    def _neg_log_mix(self, y, z):
        psi0 = max(self.nu0, VAR_MIN)
        psi1 = self.nu0 + self.nu1
        with np.errstate(divide="ignore"):
            la = np.log(1.0 - self.rate) + _log_normal_pdf(y, z, psi0)
            lb = np.log(self.rate) + _log_normal_pdf(y, z, psi1)
        return -np.logaddexp(la, lb)

    def cost(self, y, mask, pbar, nup, order=16):
        """-E[log p(y|z)] over z ~ N(pbar, nup), by composite quadrature.

        The log-mixture has a narrow well of width about sqrt(nu0) around the
        data value; panel edges are pinned to that well so a fixed node count
        resolves it at any scale separation.
        """
        y, pbar, nup = np.broadcast_arrays(_as_float(y), _as_float(pbar), _as_float(nup))
        shape = y.shape
        yf = y.reshape(-1)
        pf = pbar.reshape(-1)
        vf = np.maximum(nup.reshape(-1), 0.0)
        sd = np.sqrt(vf)
        lo = pf - 9.0 * sd
        hi = pf + 9.0 * sd
        s0 = np.sqrt(max(self.nu0, VAR_MIN))
        # panels at the spread scale keep the smooth part spectral; panels at
        # the well scale keep the narrow part resolved, and are only needed
        # when some spread is wide enough to straddle the well
        cols = [lo, hi] + [np.clip(pf + k * sd, lo, hi) for k in (-5.0, -2.0, 0.0, 2.0, 5.0)]
        if sd.size and s0 < sd.max() / 3.0:
            cols += [np.clip(yf + k * s0, lo, hi)
                     for k in (-20.0, -8.0, -2.0, 2.0, 8.0, 20.0)]
        edges = np.stack(cols, axis=1)
        edges.sort(axis=1)
        nodes, weights = np.polynomial.legendre.leggauss(order)
        val = np.zeros(yf.shape)
        for j in range(edges.shape[1] - 1):
            half = 0.5 * (edges[:, j + 1] - edges[:, j])
            mid = 0.5 * (edges[:, j + 1] + edges[:, j])
            z = mid[:, None] + half[:, None] * nodes
            dens = np.exp(_log_normal_pdf(z, pf[:, None], np.maximum(vf, 1e-300)[:, None]))
            f = dens * self._neg_log_mix(yf[:, None], z)
            val += half * (f @ weights)
        # degenerate spread: the expectation collapses to a point evaluation
        tiny = sd <= 1e-150
        if np.any(tiny):
            val[tiny] = self._neg_log_mix(yf[tiny], pf[tiny])
        return np.where(mask, val.reshape(shape), 0.0)

    def em_update(self, y, mask, phat, nup):
        nobs = int(np.count_nonzero(mask))
        if nobs == 0 or not self.tune:
            return self
        y, phat, nup = np.broadcast_arrays(_as_float(y), _as_float(phat), _as_float(nup))
        rho, m0, v0, m1, v1 = self._components(y, phat, nup)
        rho = np.where(mask, rho, 0.0)
        e0 = (y - m0) ** 2 + v0
        e1 = (y - m1) ** 2 + v1
        rate, psi0, psi1 = self.rate, self.nu0, self.nu0 + self.nu1
        if "rate" in self.tune:
            rate = float(np.clip(np.sum(rho) / nobs, RATE_MIN, RATE_MAX))
        w0 = np.where(mask, 1.0 - rho, 0.0)
        if "nu0" in self.tune:
            psi0 = float(np.sum(w0 * e0) / max(np.sum(w0), 1e-300))
            psi0 = max(psi0, VAR_MIN)
        if "nu1" in self.tune:
            psi1 = float(np.sum(rho * e1) / max(np.sum(rho), 1e-300))
        nu1 = max(psi1 - psi0, VAR_MIN)
        return GaussianMixtureLikelihood(rate, psi0, nu1, self.tune)


class LaplacianLikelihood:
    """Additive white Laplacian noise with rate parameter, possibly incomplete.

    Posterior moments follow from splitting the tilted Gaussian at the data
    point into two truncated halves; everything is evaluated through
    log-normal-cdf calls so the weights stay finite, with an adaptive
    quadrature fallback when a truncation argument is extreme enough to make
    the truncated-variance expression cancel badly.
    """

    FALLBACK_ARG = 25.0

    def __init__(self, rate, tune=()):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.tune = tuple(tune)

    def __repr__(self):
        return f"LaplacianLikelihood(rate={self.rate!r})"

    def _halves(self, y, phat, nup):
        """Weights and truncated moments of the two tilted halves of u = z - y."""
        lam = self.rate
        mu = phat - y
        sig = np.sqrt(nup)
        # Tilting by exp(-lam*u) on u > 0 shifts the Gaussian center down by
        # lam*nup; tilting by exp(+lam*u) on u < 0 shifts it up.
        mu_pos = mu - lam * nup
        mu_neg = mu + lam * nup
        log_w_pos = -lam * mu + 0.5 * lam ** 2 * nup + log_ndtr(mu_pos / sig)
        log_w_neg = lam * mu + 0.5 * lam ** 2 * nup + log_ndtr(-mu_neg / sig)
        with np.errstate(over="ignore"):
            w_pos = 1.0 / (1.0 + np.exp(log_w_neg - log_w_pos))
        w_neg = 1.0 - w_pos
        alpha = -mu_pos / sig           # lower truncation of the positive half
        beta = -mu_neg / sig            # upper truncation of the negative half
        # Inverse Mills ratios, stable through the log-cdf.
        r_pos = np.exp(_log_phi(alpha) - log_ndtr(-alpha))
        r_neg = np.exp(_log_phi(beta) - log_ndtr(beta))
        m_pos = mu_pos + sig * r_pos
        m_neg = mu_neg - sig * r_neg
        var_pos = nup * (1.0 + alpha * r_pos - r_pos ** 2)
        var_neg = nup * (1.0 - beta * r_neg - r_neg ** 2)
        var_pos = np.maximum(var_pos, 0.0)
        var_neg = np.maximum(var_neg, 0.0)
        extreme = np.maximum(np.abs(alpha), np.abs(beta)) > self.FALLBACK_ARG
        return w_pos, w_neg, m_pos, m_neg, var_pos, var_neg, extreme

    def posterior_moments(self, y, mask, phat, nup):
        y, phat, nup = np.broadcast_arrays(_as_float(y), _as_float(phat), _as_float(nup))
        w_pos, w_neg, m_pos, m_neg, var_pos, var_neg, extreme = self._halves(y, phat, nup)
        mean_u = w_pos * m_pos + w_neg * m_neg
        var_u = (w_pos * var_pos + w_neg * var_neg
                 + w_pos * w_neg * (m_pos - m_neg) ** 2)
        zhat = y + mean_u
        nuz = var_u
        if np.any(extreme & mask):
            flat_idx = np.flatnonzero(extreme & mask)
            for i in flat_idx:
                zq, vq = _laplace_quad_moments(
                    self.rate, y.flat[i], phat.flat[i], nup.flat[i])
                zhat.flat[i] = zq
                nuz.flat[i] = vq
        zhat = np.where(mask, zhat, phat)
        nuz = np.where(mask, nuz, nup)
        return zhat, nuz

    def mean_abs_residual(self, y, mask, phat, nup):
        """E|y - z| under the entrywise z-posterior (EM statistic)."""
        y, phat, nup = np.broadcast_arrays(_as_float(y), _as_float(phat), _as_float(nup))
        w_pos, w_neg, m_pos, m_neg, _, _, extreme = self._halves(y, phat, nup)
        val = w_pos * m_pos - w_neg * m_neg
        if np.any(extreme & mask):
            for i in np.flatnonzero(extreme & mask):
                val.flat[i] = _laplace_quad_absmean(
                    self.rate, y.flat[i], phat.flat[i], nup.flat[i])
        return np.where(mask, val, 0.0)

    def cost(self, y, mask, pbar, nup):
        # E|y - z| for z ~ N(pbar, nup) has the folded-normal closed form.
        y, pbar, nup = np.broadcast_arrays(_as_float(y), _as_float(pbar), _as_float(nup))
        m = pbar - y
        sig = np.sqrt(np.maximum(nup, 0.0))
        safe = np.maximum(sig, 1e-300)
        fold = m * (1.0 - 2.0 * np.exp(log_ndtr(-m / safe))) + 2.0 * safe * np.exp(_log_phi(m / safe))
        fold = np.where(sig > 0, fold, np.abs(m))
        term = -np.log(self.rate / 2.0) + self.rate * fold
        return np.where(mask, term, 0.0)

    def em_update(self, y, mask, phat, nup):
        if "rate" not in self.tune:
            return self
        nobs = int(np.count_nonzero(mask))
        if nobs == 0:
            return self
        mean_abs = np.sum(self.mean_abs_residual(y, mask, phat, nup)) / nobs
        rate = 1.0 / max(mean_abs, 1e-300)
        return LaplacianLikelihood(min(rate, 1.0 / VAR_MIN), self.tune)


def _log_phi(x):
    return -0.5 * (x ** 2 + _LOG_2PI)


def _awgn_moments(y, phat, nup, noise_var):
    total = nup + noise_var
    gain = nup / total
    return phat + gain * (y - phat), gain * noise_var


def _laplace_quad_moments(rate, y, phat, nup):
    """Adaptive-quadrature posterior moments for one extreme-tilt entry."""
    def log_post(z):
        return -rate * abs(y - z) + _log_normal_pdf(z, phat, nup)

    # Log-concave and unimodal: the mode is either the kink at y or the
    # stationary point of one tilted branch.
    cands = [y, phat - rate * nup, phat + rate * nup]
    mode = max(cands, key=log_post)
    peak = log_post(mode)
    width = max(np.sqrt(nup), 1.0 / rate)
    lo, hi = mode - 60 * width, mode + 60 * width
    pts = sorted(p for p in (y, mode) if lo < p < hi)

    def f(z, g):
        return np.exp(log_post(z) - peak) * g(z)

    z0 = integrate.quad(f, lo, hi, args=(lambda z: 1.0,), points=pts, limit=200)[0]
    z1 = integrate.quad(f, lo, hi, args=(lambda z: z,), points=pts, limit=200)[0]
    z2 = integrate.quad(f, lo, hi, args=(lambda z: z * z,), points=pts, limit=200)[0]
    mean = z1 / z0
    return mean, max(z2 / z0 - mean ** 2, 0.0)


def _laplace_quad_absmean(rate, y, phat, nup):
    def log_post(z):
        return -rate * abs(y - z) + _log_normal_pdf(z, phat, nup)

    cands = [y, phat - rate * nup, phat + rate * nup]
    mode = max(cands, key=log_post)
    peak = log_post(mode)
    width = max(np.sqrt(nup), 1.0 / rate)
    lo, hi = mode - 60 * width, mode + 60 * width
    pts = sorted(p for p in (y, mode) if lo < p < hi)

    def f(z, g):
        return np.exp(log_post(z) - peak) * g(z)

    z0 = integrate.quad(f, lo, hi, args=(lambda z: 1.0,), points=pts, limit=200)[0]
    za = integrate.quad(f, lo, hi, args=(lambda z: abs(y - z),), points=pts, limit=200)[0]
    return za / z0


def residual_transform(zhat, nuz, phat, nup, nus_cap=np.inf):
    """Map z-posterior moments to the scaled residual (shat, nus).

    nup must already be floored strictly positive.  nus is clamped to
    [0, nus_cap]: non-log-concave likelihoods can push the z-posterior
    variance above nup, which would otherwise break the positivity of the
    downstream pseudo-variance denominators.
    """
    shat = (zhat - phat) / nup
    nus = (1.0 - nuz / nup) / nup
    return shat, np.clip(nus, 0.0, nus_cap)
