"""Exact finite-support calculus for the thinning flow.

Everything lives on the truncated support {0, ..., N} of a target table mu.
The central objects are the relative density f = mu / pi_T against the
Poisson reference pi_T, its smoothing h(t, x) = P_{T-t} f(x) under the
Poisson semigroup, and the jump intensity

    lambda(t, x) = h(t, x + 1) / h(t, x),

which drives a counting process from 0 at time 0 to mu at time T.  The
posterior-mean denoiser m(t, x) = E[X_T | X_t = x] relates to the intensity
through m(t, x) = x + (T - t) * lambda(t, x); both sides are computed here
by independent routes (posterior enumeration vs. semigroup ratios) so the
relation can be verified numerically.

f spans hundreds of orders of magnitude on wide supports, so all products
and ratios are formed in log space with log-sum-exp reductions.  f is
extended by 0 beyond the cap, which makes the cap state absorbing
(lambda -> 0 there); diagnostics exclude those states by mass filters.
"""

from __future__ import annotations

import threading
import warnings
from collections import OrderedDict

import numpy as np
from scipy import special

from binflow.targets import TargetPmf, moments

__all__ = [
    "NumericError",
    "PosteriorSupportError",
    "poisson_log_pmf",
    "poisson_pmf",
    "semigroup_apply",
    "FlowTables",
    "relative_density",
    "h_eval",
    "intensity",
    "oracle_denoiser",
    "oracle_denoiser_table",
    "flow_marginal",
    "binomial_thin",
    "bridge_pmf",
    "OracleDenoiser",
]

ZERO_FLOOR = 1e-300
_H_CACHE_SIZE = 4096


class NumericError(ArithmeticError):
    """A log-space quantity came out non-finite where it must be finite."""


class PosteriorSupportError(ValueError):
    """The noisy state is incompatible with every state carrying mass."""


def poisson_log_pmf(t, k):
    """log pi_t(k) = -t + k log t - log k!, with pi_0 = delta_0."""
    k = np.asarray(k, dtype=float)
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0.0:
        return np.where(k == 0, 0.0, -np.inf)
    return -t + k * np.log(t) - special.gammaln(k + 1.0)


def poisson_pmf(t, k):
    """pi_t(k) = e^{-t} t^k / k!, evaluated in log space then exponentiated."""
    if np.ndim(k) == 0:
        if k < 0:
            raise ValueError("k must be >= 0")
        return float(np.exp(poisson_log_pmf(t, k)))
    return np.exp(poisson_log_pmf(t, np.asarray(k)))


def semigroup_apply(G, t, x):
    """Apply the Poisson smoothing P_t G(x) = sum_y G(x + y) pi_t(y).

    ``G`` is a table over {0..N} and is treated as 0 beyond N, so the sum
    truncates at y = N - x.  Direct summation; intended for moderate
    magnitudes (the flow tables use the log-space route instead).
    """
    G = np.asarray(G, dtype=float)
    n = G.size - 1
    x = int(x)
    if not 0 <= x <= n:
        raise ValueError(f"x={x} outside table range {{0,...,{n}}}")
    y = np.arange(n - x + 1)
    return float(np.dot(G[x:], np.exp(poisson_log_pmf(t, y))))


class FlowTables:
    """Precomputed log relative density and cached h-transform evaluations.

    Immutable after construction; the per-time cache of log h vectors is
    lock-protected so tables can be shared across threads.
    """

    def __init__(self, pmf: TargetPmf, T: float, log_f: np.ndarray, floored: int):
        self.pmf = pmf
        self.T = float(T)
        self.log_f = log_f
        self.floored_states = floored
        self._cache: OrderedDict[float, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    @property
    def support_cap(self) -> int:
        return self.pmf.support_cap

    def f(self) -> np.ndarray:
        return np.exp(self.log_f)

    def log_h_vec(self, t: float) -> np.ndarray:
        """log h(t, x) for x in {0..N+1}; the entry at N+1 is -inf.

        h(t, x) = sum_{y <= N-x} f(x+y) pi_{T-t}(y); vectors are cached per
        time point because samplers and quadratures revisit a fixed grid.
        """
        if not 0.0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        key = float(t)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        n = self.support_cap
        log_pi = poisson_log_pmf(self.T - t, np.arange(n + 1))
        rows = np.full((n + 2, n + 1), -np.inf)
        for x in range(n + 1):
            rows[x, : n + 1 - x] = self.log_f[x:] + log_pi[: n + 1 - x]
        out = special.logsumexp(rows, axis=1)
        out.setflags(write=False)
        with self._lock:
            self._cache[key] = out
            if len(self._cache) > _H_CACHE_SIZE:
                self._cache.popitem(last=False)
        return out

    def log_intensity(self, t: float, x) -> np.ndarray:
        """log lambda(t, x) = log h(t, x+1) - log h(t, x); -inf at the cap."""
        if not 0.0 <= t < self.T:
            raise ValueError(f"t={t} outside [0, {self.T})")
        log_h = self.log_h_vec(t)
        x = np.asarray(x, dtype=np.int64)
        if np.any(x < 0) or np.any(x > self.support_cap):
            raise ValueError("state outside the support")
        return log_h[x + 1] - log_h[x]


def relative_density(pmf: TargetPmf, T: float, zero_floor: float = ZERO_FLOOR) -> FlowTables:
    """Form f = mu / pi_T in log space and bundle it into flow tables.

    Zero entries of mu are floored at ``zero_floor`` (with a warning) so f
    stays strictly positive on the support, mirroring the convention that
    vanishing states carry arbitrarily small but positive mass.
    """
    if T <= 0:
        raise ValueError("T must be > 0")
    probs = pmf.probs
    floored = int(np.sum(probs <= 0))
    if floored:
        warnings.warn(
            f"{floored} zero-probability entries floored at {zero_floor:g} before "
            "forming the relative density",
            RuntimeWarning,
            stacklevel=2,
        )
    log_mu = np.log(np.maximum(probs, zero_floor))
    log_pi_T = poisson_log_pmf(T, np.arange(pmf.support_cap + 1))
    log_f = log_mu - log_pi_T
    bad = np.nonzero(~np.isfinite(log_f))[0]
    if bad.size:
        raise NumericError(f"relative density non-finite at x={int(bad[0])}")
    tables = FlowTables(pmf, T, log_f, floored)
    # Reconstruction check: sum_x f(x) pi_T(x) = 1, i.e. log h(0, 0) = 0.
    recon = special.logsumexp(log_f + log_pi_T)
    if abs(recon) > 1e-10:
        raise NumericError(f"sum f*pi_T = exp({recon}) deviates from 1 beyond 1e-10")
    return tables


def h_eval(tables: FlowTables, t: float, x: int) -> float:
    """h(t, x) = P_{T-t} f(x); x = N+1 is allowed and evaluates to 0."""
    x = int(x)
    if not 0 <= x <= tables.support_cap + 1:
        raise ValueError(f"x={x} outside {{0,...,{tables.support_cap + 1}}}")
    return float(np.exp(tables.log_h_vec(t)[x]))


def intensity(tables: FlowTables, t: float, x) -> np.ndarray:
    """Jump intensity lambda(t, x) per coordinate.

    States at the cap get intensity 0 (f vanishes beyond the cap), which
    makes the boundary absorbing; keep mass filters on when comparing
    against posterior-mean quantities near the cap.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    return np.exp(tables.log_intensity(t, x))


def _log_binom_weights(n_max, x, alpha):
    """log Binomial_{y,alpha}(x) for y = x..n_max (vector over y)."""
    y = np.arange(x, n_max + 1, dtype=float)
    return (
        special.gammaln(y + 1.0)
        - special.gammaln(x + 1.0)
        - special.gammaln(y - x + 1.0)
        + x * np.log(alpha)
        + (y - x) * np.log1p(-alpha)
    )


def oracle_denoiser(pmf: TargetPmf, T: float, t: float, x: int) -> float:
    """Posterior mean E[X_T | X_t = x] by brute-force enumeration.

    The posterior over clean states y >= x is proportional to
    Binomial_{y, t/T}(x) mu(y); everything is accumulated in log space.
    Always >= x; equals x at t = T and the prior mean at t = 0 (x = 0).
    """
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    x = int(x)
    n = pmf.support_cap
    if not 0 <= x <= n:
        raise ValueError(f"x={x} outside support {{0,...,{n}}}")
    alpha = t / T
    if alpha == 1.0:
        if pmf.probs[x] <= 0:
            raise PosteriorSupportError(f"no mass at x={x} for t=T")
        return float(x)
    if alpha == 0.0:
        if x > 0:
            raise PosteriorSupportError("at t=0 only x=0 is reachable")
        return moments(pmf)[0]
    log_w = _log_binom_weights(n, x, alpha) + pmf.log_probs[x:]
    log_z = special.logsumexp(log_w)
    if not np.isfinite(log_z):
        raise PosteriorSupportError(f"x={x} exceeds every state carrying mass")
    post = np.exp(log_w - log_z)
    return float(np.dot(np.arange(x, n + 1), post))


def oracle_denoiser_table(pmf: TargetPmf, T: float, t: float) -> np.ndarray:
    """Vector of posterior means over all x in {0..N} at one time point."""
    n = pmf.support_cap
    alpha = t / T
    if alpha == 1.0:
        return np.arange(n + 1, dtype=float)
    if alpha == 0.0:
        out = np.full(n + 1, np.nan)
        out[0] = moments(pmf)[0]
        return out
    ys = np.arange(n + 1, dtype=float)
    xs = np.arange(n + 1, dtype=float)
    log_w = np.full((n + 1, n + 1), -np.inf)
    mask = ys[:, None] >= xs[None, :]
    with np.errstate(invalid="ignore"):
        vals = (
            special.gammaln(ys[:, None] + 1.0)
            - special.gammaln(xs[None, :] + 1.0)
            - special.gammaln(ys[:, None] - xs[None, :] + 1.0)
            + xs[None, :] * np.log(alpha)
            + (ys[:, None] - xs[None, :]) * np.log1p(-alpha)
            + pmf.log_probs[:, None]
        )
    log_w[mask] = vals[mask]
    log_z = special.logsumexp(log_w, axis=0)
    post = np.exp(log_w - log_z[None, :])
    return post.T @ ys


def flow_marginal(tables: FlowTables, t: float) -> np.ndarray:
    """Time marginal p_t(x) = h(t, x) pi_t(x) over {0..N}."""
    if not 0.0 <= t <= tables.T:
        raise ValueError(f"t={t} outside [0, {tables.T}]")
    n = tables.support_cap
    log_pi = poisson_log_pmf(t, np.arange(n + 1))
    return np.exp(tables.log_h_vec(t)[: n + 1] + log_pi)


def binomial_thin(x_T, alpha: float, rng) -> np.ndarray:
    """Per-coordinate Binomial(x_T^i, alpha) draw (the thinning corruption)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x_T = np.asarray(x_T)
    if np.any(x_T < 0):
        raise ValueError("counts must be >= 0")
    return rng.binomial(x_T, alpha)


def bridge_pmf(x_T: int, t: float, T: float) -> np.ndarray:
    """Binomial(x_T, t/T) table of length x_T + 1 (the flow's bridge law)."""
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    x_T = int(x_T)
    alpha = t / T
    out = np.zeros(x_T + 1)
    if alpha == 0.0:
        out[0] = 1.0
        return out
    if alpha == 1.0:
        out[-1] = 1.0
        return out
    j = np.arange(x_T + 1, dtype=float)
    log_p = (
        special.gammaln(x_T + 1.0)
        - special.gammaln(j + 1.0)
        - special.gammaln(x_T - j + 1.0)
        + j * np.log(alpha)
        + (x_T - j) * np.log1p(-alpha)
    )
    out = np.exp(log_p)
    return out / out.sum()


class OracleDenoiser:
    """Exact denoiser m(t, x) = x + (T - t) lambda(t, x) from flow tables.

    Applies coordinatewise, so it also serves product targets in d > 1.
    Pure given the (immutable) tables; safe to share across threads.
    """

    def __init__(self, tables: FlowTables):
        self.tables = tables
        self.T = tables.T

    def __call__(self, t: float, x):
        x = np.asarray(x)
        if t == self.T:
            return x.astype(float)
        lam = np.exp(self.tables.log_intensity(t, x.reshape(-1))).reshape(x.shape)
        return x + (self.T - t) * lam
