"""Synthetic target distributions on truncated integer supports.

Each target is a probability table on {0, ..., support_cap}, renormalized
after truncation.  The seven built-in families cover light tails (Poisson,
zero-inflated Poisson), bimodality (Poisson and negative-binomial mixtures)
and heavy tails (beta-negative-binomial, Zipf, Yule-Simon).  Zipf and
Yule-Simon place no mass at 0; their support starts at 1.

All probability evaluations are done in log space and exponentiated once,
so the tables stay accurate far into the tails.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "TargetPmf",
    "FAMILIES",
    "DEFAULT_SUPPORT_CAPS",
    "ParameterError",
    "TruncationError",
    "make_target",
    "custom_target",
    "log_pmf",
    "moments",
    "sample_target",
    "export_pmf_csv",
]


class ParameterError(ValueError):
    """Family parameters outside their admissible range."""


class TruncationError(ValueError):
    """Truncation discards more mass than the family tolerates."""


FAMILIES = (
    "poisson",
    "poisson_mixture",
    "zip",
    "nbm",
    "bnb",
    "zipf",
    "yule_simon",
)

# Support sizes used throughout the experiments, one per family.
DEFAULT_SUPPORT_CAPS = {
    "poisson": 40,
    "poisson_mixture": 140,
    "zip": 50,
    "nbm": 150,
    "bnb": 100,
    "zipf": 50,
    "yule_simon": 50,
}

# Maximum mass the truncation may discard before construction fails.
# The heavy-tailed families genuinely leave percent-level mass beyond the
# default caps, so their tolerances are correspondingly loose.
DEFAULT_TAIL_TOLERANCES = {
    "poisson": 1e-8,
    "zip": 1e-8,
    "poisson_mixture": 1e-3,
    "yule_simon": 1e-3,
    "nbm": 0.05,
    "bnb": 0.05,
    "zipf": 0.05,
}

DEFAULT_PARAMS = {
    "poisson": {"rate": 5.0},
    "poisson_mixture": {"weights": (0.1, 0.9), "rates": (1.0, 100.0)},
    "zip": {"zero_weight": 0.7, "rate": 5.0},
    "nbm": {"weights": (0.8, 0.2), "successes": (1.0, 10.0), "probs": (0.9, 0.1)},
    "bnb": {"successes": 5.0, "alpha": 1.5, "beta": 1.5},
    "zipf": {"exponent": 1.7},
    "yule_simon": {"shape": 2.0},
}

_BNB_QUAD_NODES = 256


@dataclass(frozen=True)
class TargetPmf:
    """Normalized probability table on {0, ..., support_cap}.

    ``tail_mass`` is the probability the untruncated law places beyond the
    cap, recorded before renormalization.  For the Zipf family, which is
    normalized on its truncated support by construction, it is measured
    against the zeta-function normalizer and is informational only.
    """

    family: str
    params: dict
    support_cap: int
    probs: np.ndarray
    log_probs: np.ndarray
    tail_mass: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        object.__setattr__(self, "log_probs", np.asarray(self.log_probs, dtype=float))
        if self.probs.shape != (self.support_cap + 1,):
            raise ValueError(
                f"probs has shape {self.probs.shape}, expected ({self.support_cap + 1},)"
            )
        if np.any(self.probs < 0):
            raise ValueError("negative probability entry")
        total = self.probs.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probs sum to {total!r}, not 1 within 1e-12")
        self.probs.setflags(write=False)
        self.log_probs.setflags(write=False)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_cap + 1)


def _normalize(family, params, cap, raw_log, tail_mass, tail_tol):
    """Renormalize log-space raw values into a TargetPmf, enforcing tail policy."""
    if tail_mass > tail_tol:
        needed = _required_cap(family, params, tail_tol, start=cap)
        raise TruncationError(
            f"{family}: truncation at support_cap={cap} discards mass "
            f"{tail_mass:.3e} > {tail_tol:.1e}; support_cap >= {needed} required"
        )
    log_z = special.logsumexp(raw_log)
    log_probs = raw_log - log_z
    probs = np.exp(log_probs)
    probs /= probs.sum()  # exact renormalization after rounding
    log_probs = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), -np.inf)
    return TargetPmf(
        family=family,
        params=dict(params),
        support_cap=cap,
        probs=probs,
        log_probs=log_probs,
        tail_mass=float(tail_mass),
    )


def _required_cap(family, params, tail_tol, start):
    cap = max(2 * start, 16)
    while cap <= (1 << 20):
        _, tail = _raw_table(family, params, cap)
        if tail <= tail_tol:
            lo, hi = start, cap
            while lo + 1 < hi:
                mid = (lo + hi) // 2
                _, t = _raw_table(family, params, mid)
                if t <= tail_tol:
                    hi = mid
                else:
                    lo = mid
            return hi
        cap *= 2
    return cap


def _poisson_log_pmf(rate, k):
    # e^{-rate} rate^k / k!, evaluated in log space
    k = np.asarray(k, dtype=float)
    if rate == 0.0:
        return np.where(k == 0, 0.0, -np.inf)
    return -rate + k * np.log(rate) - special.gammaln(k + 1.0)


def _nb_log_pmf(r, p, k):
    # C(k+r-1, k) p^r (1-p)^k with r "successes" and success probability p
    k = np.asarray(k, dtype=float)
    return (
        special.gammaln(k + r)
        - special.gammaln(k + 1.0)
        - special.gammaln(r)
        + r * np.log(p)
        + k * np.log1p(-p)
    )


def _mixture_log(log_components, weights):
    stacked = np.stack([np.log(w) + lc for w, lc in zip(weights, log_components)])
    return special.logsumexp(stacked, axis=0)


def _raw_table(family, params, cap):
    """Log-space unnormalized table over {0..cap} plus the discarded tail mass."""
    k = np.arange(cap + 1)
    if family == "poisson":
        rate = params["rate"]
        raw = _poisson_log_pmf(rate, k)
        tail = float(special.gammainc(cap + 1.0, rate))  # P[K > cap]
        return raw, tail
    if family == "poisson_mixture":
        weights = params["weights"]
        rates = params["rates"]
        raw = _mixture_log([_poisson_log_pmf(r, k) for r in rates], weights)
        tail = float(sum(w * special.gammainc(cap + 1.0, r) for w, r in zip(weights, rates)))
        return raw, tail
    if family == "zip":
        w0 = params["zero_weight"]
        rate = params["rate"]
        raw = np.log1p(-w0) + _poisson_log_pmf(rate, k)
        raw[0] = np.log(w0 + (1.0 - w0) * np.exp(-rate))
        tail = float((1.0 - w0) * special.gammainc(cap + 1.0, rate))
        return raw, tail
    if family == "nbm":
        weights = params["weights"]
        rs = params["successes"]
        ps = params["probs"]
        raw = _mixture_log([_nb_log_pmf(r, p, k) for r, p in zip(rs, ps)], weights)
        tail = float(
            sum(w * special.betainc(cap + 1.0, r, 1.0 - p)
                for w, r, p in zip(weights, rs, ps))
        )
        return raw, tail
    if family == "bnb":
        r = params["successes"]
        a = params["alpha"]
        b = params["beta"]
        raw = _bnb_log_table(r, a, b, cap, params.get("quad_nodes", _BNB_QUAD_NODES))
        # Closed-form total via betaln gives the tail without extending the table.
        total = np.exp(special.logsumexp(_bnb_log_closed(r, a, b, k)))
        tail = float(max(0.0, 1.0 - total))
        return raw, tail
    if family == "zipf":
        alpha = params["exponent"]
        raw = np.full(cap + 1, -np.inf)
        raw[1:] = -alpha * np.log(k[1:].astype(float))
        # The table is normalized on its truncated support; the zeta
        # normalizer is used only to report how much an untruncated Zipf
        # would place beyond the cap.
        zeta = special.zeta(alpha, 1.0)
        tail = float(1.0 - np.exp(special.logsumexp(raw[1:])) / zeta)
        return raw, tail
    if family == "yule_simon":
        rho = params["shape"]
        raw = np.full(cap + 1, -np.inf)
        x = k[1:].astype(float)
        raw[1:] = (
            np.log(rho)
            + special.gammaln(x)
            + special.gammaln(rho + 1.0)
            - special.gammaln(x + rho + 1.0)
        )
        tail = float(max(0.0, 1.0 - np.exp(special.logsumexp(raw[1:]))))
        return raw, tail
    raise ParameterError(f"unknown family {family!r}")


def _bnb_log_closed(r, a, b, k):
    # Reference closed form of the beta-negative-binomial table (tests use
    # it as the oracle for the quadrature construction).
    k = np.asarray(k, dtype=float)
    return (
        special.gammaln(k + r)
        - special.gammaln(k + 1.0)
        - special.gammaln(r)
        + special.betaln(r + a, k + b)
        - special.betaln(a, b)
    )


def _bnb_log_table(r, a, b, cap, n_nodes):
    """Beta mixture of negative binomials by Gauss-Legendre quadrature on (0,1).

    The Beta density has fractional-power endpoints, so the nodes are mapped
    through t = sin^2(theta); for half-integer (a, b) the transformed
    integrand is analytic and the quadrature converges spectrally.
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    theta = 0.25 * np.pi * (nodes + 1.0)
    log_w = np.log(0.25 * np.pi * weights)
    log_s = np.log(np.sin(theta))
    log_c = np.log(np.cos(theta))
    t = np.sin(theta) ** 2
    # dt = 2 sin cos dtheta folded into the Beta density's log weight
    log_beta_w = (
        np.log(2.0) + (2.0 * a - 1.0) * log_s + (2.0 * b - 1.0) * log_c
        - special.betaln(a, b) + log_w
    )
    k = np.arange(cap + 1)
    log_nb = (
        special.gammaln(k[:, None] + r)
        - special.gammaln(k[:, None] + 1.0)
        - special.gammaln(r)
        + 2.0 * r * log_s[None, :]
        + k[:, None] * np.log1p(-t)[None, :]
    )
    return special.logsumexp(log_nb + log_beta_w[None, :], axis=1)


def _validate_params(family, params):
    merged = dict(DEFAULT_PARAMS.get(family, {}))
    merged.update(params or {})
    try:
        if family == "poisson":
            if merged["rate"] <= 0:
                raise ParameterError("poisson: rate must be > 0")
        elif family == "poisson_mixture":
            w = np.asarray(merged["weights"], dtype=float)
            r = np.asarray(merged["rates"], dtype=float)
            if w.shape != r.shape or w.ndim != 1:
                raise ParameterError("poisson_mixture: weights and rates must align")
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ParameterError("poisson_mixture: weights must be positive and sum to 1")
            if np.any(r <= 0):
                raise ParameterError("poisson_mixture: rates must be > 0")
            merged["weights"] = tuple(w)
            merged["rates"] = tuple(r)
        elif family == "zip":
            if not 0.0 < merged["zero_weight"] < 1.0:
                raise ParameterError("zip: zero_weight must lie in (0, 1)")
            if merged["rate"] <= 0:
                raise ParameterError("zip: rate must be > 0")
        elif family == "nbm":
            w = np.asarray(merged["weights"], dtype=float)
            r = np.asarray(merged["successes"], dtype=float)
            p = np.asarray(merged["probs"], dtype=float)
            if not (w.shape == r.shape == p.shape) or w.ndim != 1:
                raise ParameterError("nbm: weights, successes and probs must align")
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ParameterError("nbm: weights must be positive and sum to 1")
            if np.any(r <= 0) or np.any((p <= 0) | (p >= 1)):
                raise ParameterError("nbm: successes must be > 0 and probs in (0, 1)")
            merged["weights"] = tuple(w)
            merged["successes"] = tuple(r)
            merged["probs"] = tuple(p)
        elif family == "bnb":
            if merged["successes"] <= 0 or merged["alpha"] <= 0 or merged["beta"] <= 0:
                raise ParameterError("bnb: successes, alpha and beta must be > 0")
        elif family == "zipf":
            if merged["exponent"] <= 1.0:
                raise ParameterError("zipf: exponent must be > 1")
        elif family == "yule_simon":
            if merged["shape"] <= 0:
                raise ParameterError("yule_simon: shape must be > 0")
        else:
            raise ParameterError(f"unknown family {family!r}; choose one of {FAMILIES}")
    except KeyError as exc:
        raise ParameterError(f"{family}: missing parameter {exc.args[0]!r}") from None
    return merged


def make_target(family, params=None, support_cap=None, max_tail_mass=None):
    """Build a truncated, renormalized target table.

    Parameters
    ----------
    family : str
        One of ``FAMILIES``.
    params : dict, optional
        Family parameters; missing entries fall back to the experiment
        defaults in ``DEFAULT_PARAMS``.
    support_cap : int, optional
        Largest state in the table; defaults to the family's experiment cap.
    max_tail_mass : float, optional
        Override for the family's truncation tolerance.

    Raises
    ------
    ParameterError
        If the parameters are inadmissible.
    TruncationError
        If the cap discards more mass than tolerated; the message names the
        smallest sufficient cap.
    """
    family = str(family).lower().replace("-", "_")
    if family == "custom":
        raise ParameterError("use custom_target() to build custom tables")
    params = _validate_params(family, params)
    cap = DEFAULT_SUPPORT_CAPS[family] if support_cap is None else int(support_cap)
    if cap < 1:
        raise ParameterError("support_cap must be >= 1")
    tol = DEFAULT_TAIL_TOLERANCES[family] if max_tail_mass is None else float(max_tail_mass)
    raw, tail = _raw_table(family, params, cap)
    return _normalize(family, params, cap, raw, tail, tol)


def custom_target(probs, params=None):
    """Wrap an explicit probability vector over {0..len(probs)-1} as a target."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or probs.size < 2:
        raise ParameterError("custom target needs a 1-d table with at least 2 entries")
    if np.any(probs < 0) or probs.sum() <= 0:
        raise ParameterError("custom target needs non-negative entries with positive mass")
    probs = probs / probs.sum()
    log_probs = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), -np.inf)
    return TargetPmf(
        family="custom",
        params=dict(params or {}),
        support_cap=probs.size - 1,
        probs=probs,
        log_probs=log_probs,
        tail_mass=0.0,
    )


def log_pmf(pmf: TargetPmf, x: int) -> float:
    """Exact log-probability of state ``x``; -inf where the table is zero."""
    x = int(x)
    if x < 0 or x > pmf.support_cap:
        raise ValueError(f"x={x} outside support {{0,...,{pmf.support_cap}}}")
    return float(pmf.log_probs[x])


def moments(pmf: TargetPmf) -> tuple[float, float]:
    """Exact (mean, variance) of the truncated table."""
    k = pmf.support.astype(float)
    mean = float(np.dot(k, pmf.probs))
    var = float(np.dot((k - mean) ** 2, pmf.probs))
    return mean, var


def sample_target(pmf: TargetPmf, n: int, rng) -> np.ndarray:
    """Draw ``n`` i.i.d. states by inverse-CDF lookup on the cumulative table."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cdf = np.cumsum(pmf.probs)
    cdf[-1] = 1.0
    u = rng.random(n)
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def export_pmf_csv(pmf: TargetPmf, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "prob"])
        for x, p in enumerate(pmf.probs):
            writer.writerow([x, repr(float(p))])
