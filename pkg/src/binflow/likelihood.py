"""Negative log-likelihood through the thinning-flow identity.

For a state x and the exact process intensity lambda,

    -log mu(x) = int_0^T  E_{y ~ Binomial(x, t/T)} [ D((x-y)/(T-t), lambda(t, y)) ] dt,

with the entropic divergence D(a, b) = a log a - a log b - a + b.  The
integrand diverges like -(x/T) log(T-t) at the right endpoint, but the
expected rate-target E[(x-y)/(T-t)] equals x/T for every t, so the
log-singular part integrates in closed form to x (1 - log T).  Using the
thinned-binomial identity ((x-y)/(T-t)) B_{x,t/T}(y) = (x/T) B_{x-1,t/T}(y),
what remains is the smooth function

    r(t) = (x/T) E_{y ~ B_{x-1,t/T}} [ log(x-y) - log lambda(t, y) - 1 ]
         + E_{y ~ B_{x,t/T}} [ lambda(t, y) ],

handled by plain Gauss-Legendre quadrature.  ``nll_quadrature`` implements
this split with the inner expectation enumerated exactly;
``nll_monte_carlo`` samples (t, y) pairs instead and works with any rate
source, including learned ones (whose rates are floored at RATE_FLOOR
inside the log, with floor events counted).

Rate sources are callables ``rate(t, y) -> lambda`` where ``t`` is a scalar
or a per-row vector and ``y`` an integer array of shape (n, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from binflow.poisson import FlowTables, bridge_pmf

__all__ = [
    "RATE_FLOOR",
    "NllEstimate",
    "OracleRate",
    "DenoiserRate",
    "nll_integrand",
    "nll_quadrature",
    "nll_monte_carlo",
    "mean_nll",
]

RATE_FLOOR = 1e-10
_CHUNK = 1 << 16


@dataclass(frozen=True)
class NllEstimate:
    value: float                 # nats
    std_error: float
    n_time: int
    n_inner: int
    mode: str                    # "quadrature" | "monte_carlo"
    floor_events: int = 0

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")
        if self.mode == "quadrature" and self.std_error != 0.0:
            raise ValueError("quadrature estimates carry no standard error")


class OracleRate:
    """Exact intensity lambda(t, y) from flow tables, coordinatewise.

    Scalar times hit the tables' per-time cache; vector times are evaluated
    in one batched log-sum-exp sweep (used by the Monte-Carlo estimator,
    whose times never repeat).
    """

    def __init__(self, tables: FlowTables):
        self.tables = tables
        self.T = tables.T

    def __call__(self, t, y):
        y = np.asarray(y, dtype=np.int64)
        if np.ndim(t) == 0:
            return np.exp(self.tables.log_intensity(float(t), y.reshape(-1))).reshape(y.shape)
        t = np.asarray(t, dtype=float)
        flat_y = y.reshape(t.size, -1) if y.ndim > 1 else y.reshape(-1, 1)
        out = np.empty_like(flat_y, dtype=float)
        for j in range(flat_y.shape[1]):
            out[:, j] = self._batched(t, flat_y[:, j])
        return out.reshape(y.shape)

    def _batched(self, ts, ys):
        n_cap = self.tables.support_cap
        log_f = self.tables.log_f
        lam = np.empty(ts.size)
        for lo in range(0, ts.size, _CHUNK):
            hi = min(lo + _CHUNK, ts.size)
            t = ts[lo:hi]
            y = ys[lo:hi]
            k = np.arange(n_cap + 1)
            log_pi = poisson_log_pmf_rows(self.T - t, k)
            lam[lo:hi] = np.exp(
                _log_h_rows(log_f, y + 1, log_pi, n_cap) - _log_h_rows(log_f, y, log_pi, n_cap)
            )
        return lam


def poisson_log_pmf_rows(s, k):
    """log pi_{s_i}(k_j) as an (n, len(k)) matrix."""
    s = np.asarray(s, dtype=float)[:, None]
    k = np.asarray(k, dtype=float)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -s + k * np.log(s) - special.gammaln(k + 1.0)
    zero = (s == 0.0)
    if np.any(zero):
        out = np.where(zero & (k == 0), 0.0, np.where(zero, -np.inf, out))
    return out


def _log_h_rows(log_f, y, log_pi, n_cap):
    """log h(t_i, y_i) = lse_k [ log_f(y_i + k) + log pi_{T-t_i}(k) ], rows i."""
    k = np.arange(n_cap + 1)
    idx = y[:, None] + k[None, :]
    valid = idx <= n_cap
    padded = np.concatenate([log_f, [-np.inf]])
    terms = padded[np.minimum(idx, n_cap + 1)] + log_pi
    terms[~valid] = -np.inf
    return special.logsumexp(terms, axis=1)


class DenoiserRate:
    """Model rate (m(t, y) - y) / (T - t) from any denoiser callable.

    Rates below ``floor`` are lifted to it (the entropic divergence needs a
    positive second argument); lifted entries are counted in
    ``floor_events``.
    """

    def __init__(self, denoiser, T: float = 1.0, floor: float = RATE_FLOOR):
        self.denoiser = denoiser
        self.T = float(T)
        self.floor = float(floor)
        self.floor_events = 0

    def __call__(self, t, y):
        y = np.asarray(y)
        m = np.asarray(self.denoiser(t, y.astype(float)), dtype=float).reshape(y.shape)
        denom = self.T - np.asarray(t, dtype=float)
        if y.ndim == 2 and np.ndim(denom) == 1:
            denom = denom[:, None]
        raw = (m - y) / denom
        low = raw < self.floor
        self.floor_events += int(np.sum(low))
        return np.where(low, self.floor, raw)


def _entropic(a, b):
    alog = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return alog - a * np.log(b) - a + b


def nll_integrand(rate_source, x, t: float, y, T: float = 1.0) -> float:
    """D((x - y)/(T - t), lambda(t, y)) summed over coordinates."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(y > x):
        raise ValueError("y must be <= x componentwise")
    if t >= T:
        raise ValueError("t must be < T")
    lam = np.asarray(
        rate_source(float(t), y.astype(np.int64)[None, :]), dtype=float
    ).reshape(-1)
    lam = np.maximum(lam, RATE_FLOOR)
    a = (x - y) / (T - t)
    return float(np.sum(_entropic(a, lam)))


def nll_quadrature(tables: FlowTables, x: int, n_nodes: int = 128) -> NllEstimate:
    """Deterministic NLL via the exact singular/smooth split (d = 1)."""
    x = int(x)
    if not 0 <= x <= tables.support_cap:
        raise ValueError(f"x={x} outside support {{0,...,{tables.support_cap}}}")
    T = tables.T
    nodes, weights = np.polynomial.legendre.leggauss(int(n_nodes))
    ts = 0.5 * T * (nodes + 1.0)
    ws = 0.5 * T * weights

    total = x * (1.0 - np.log(T))
    states = np.arange(x + 1, dtype=np.int64)
    for t, w in zip(ts, ws):
        log_h = tables.log_h_vec(t)
        lam = np.exp(log_h[states + 1] - log_h[states])      # lambda(t, 0..x)
        val = float(np.dot(bridge_pmf(x, t, T), lam))
        if x > 0:
            log_lam = log_h[states[:-1] + 1] - log_h[states[:-1]]
            gaps = np.log(np.arange(x, 0, -1, dtype=float))  # log(x - y), y = 0..x-1
            val += (x / T) * float(np.dot(bridge_pmf(x - 1, t, T), gaps - log_lam - 1.0))
        total += w * val
    return NllEstimate(
        value=float(total), std_error=0.0, n_time=int(n_nodes), n_inner=0, mode="quadrature"
    )


def nll_monte_carlo(rate_source, x, n_time: int, n_inner: int = 1,
                    rng=None, T: float = 1.0) -> NllEstimate:
    """Unbiased NLL estimate from (t, y) draws: t uniform, y binomially thinned."""
    if n_time * n_inner < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    d = x.size
    floors_before = int(getattr(rate_source, "floor_events", 0))
    ts = rng.random(n_time) * T
    ts_rep = np.repeat(ts, n_inner)
    y = rng.binomial(
        np.broadcast_to(x, (ts_rep.size, d)), (ts_rep / T)[:, None]
    ).astype(np.int64)
    lam = np.maximum(np.asarray(rate_source(ts_rep, y), dtype=float), RATE_FLOOR)
    a = (x[None, :] - y) / (T - ts_rep)[:, None]
    vals = _entropic(a, lam).sum(axis=1)
    value = T * float(vals.mean())
    se = T * float(vals.std(ddof=1)) / np.sqrt(vals.size) if vals.size > 1 else 0.0
    floors = int(getattr(rate_source, "floor_events", 0)) - floors_before
    return NllEstimate(
        value=value, std_error=se, n_time=int(n_time), n_inner=int(n_inner),
        mode="monte_carlo", floor_events=floors,
    )


def mean_nll(xs, *, tables: FlowTables = None, rate_source=None, mode: str = "quadrature",
             n_nodes: int = 128, n_time: int = 1000, n_inner: int = 1, rng=None,
             T: float = 1.0) -> tuple[float, float, np.ndarray]:
    """Average NLL over a sample set; returns (mean, std error of mean, per-sample).

    Quadrature mode evaluates each distinct state once; Monte-Carlo mode
    draws independently per occurrence.
    """
    xs = np.asarray(xs, dtype=np.int64).reshape(-1)
    if xs.size == 0:
        raise ValueError("empty evaluation set")
    if mode == "quadrature":
        if tables is None:
            raise ValueError("quadrature mode needs flow tables")
        uniq, inv = np.unique(xs, return_inverse=True)
        per = np.array([nll_quadrature(tables, int(u), n_nodes).value for u in uniq])
        values = per[inv]
    elif mode == "monte_carlo":
        if rate_source is None:
            raise ValueError("monte_carlo mode needs a rate source")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        values = np.empty(xs.size)
        for i, x in enumerate(xs):
            values[i] = nll_monte_carlo(rate_source, int(x), n_time, n_inner, rng, T).value
    else:
        raise ValueError(f"unknown mode {mode!r}")
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se, values
