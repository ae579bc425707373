"""von Mises-Fisher (vMF) distributions on the unit (d-1)-sphere.

Provides the log normalization constant, log-density, the standard
concentration approximation kappa_hat = Rbar*(d - Rbar^2)/(1 - Rbar^2),
and Wood-style rejection sampling.  Everything works in log space so that
large concentrations (up to KAPPA_MAX) stay finite.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# The kappa_hat approximation is singular as Rbar -> 1; clamping keeps the
# adaptation loop numerically stable.
KAPPA_MAX = 1e4

# log I_v(x): power series below the switch point, large-argument (Hankel)
# expansion above it.  The expansion needs x >> v^2 to converge quickly,
# hence the max() with 2*v^2.
_BESSEL_SWITCH_BASE = 700.0


class DegenerateSamplesWarning(UserWarning):
    """All samples (numerically) identical; kappa clamped to KAPPA_MAX."""


def _bessel_switch(nu):
    return max(_BESSEL_SWITCH_BASE, 2.0 * nu * nu)


def _log_iv_series(nu, x):
    """log I_nu(x) by direct summation of the ascending series in log space."""
    if x == 0.0:
        return 0.0 if nu == 0.0 else -math.inf
    n_terms = int(x + 6.0 * math.sqrt(x + 1.0)) + 40
    k = np.arange(n_terms, dtype=np.float64)
    log_terms = (
        (nu + 2.0 * k) * math.log(x / 2.0)
        - _lgamma_vec(k + 1.0)
        - _lgamma_vec(nu + k + 1.0)
    )
    m = np.max(log_terms)
    return float(m + np.log(np.sum(np.exp(log_terms - m))))


def _lgamma_vec(a):
    return np.vectorize(math.lgamma)(a)


def _log_iv_asymptotic(nu, x):
    """log I_nu(x) via the large-argument expansion.

    I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k with
    a_k(nu) = prod_{j=1..k} (4 nu^2 - (2j-1)^2) / (k! 8^k).  Terms are summed
    until they stop decreasing or fall below machine precision.
    """
    mu4 = 4.0 * nu * nu
    total = 1.0
    term = 1.0
    prev_abs = math.inf
    for k in range(1, 60):
        term *= -(mu4 - (2 * k - 1) ** 2) / (8.0 * k * x)
        if abs(term) >= prev_abs or abs(term) < 1e-18:
            break
        total += term
        prev_abs = abs(term)
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(total)


def log_bessel_iv(nu: float, x: float) -> float:
    """log of the modified Bessel function of the first kind, I_nu(x), x >= 0."""
    if nu < 0 or x < 0:
        raise ValueError("log_bessel_iv requires nu >= 0 and x >= 0")
    if x <= _bessel_switch(nu):
        return _log_iv_series(nu, x)
    return _log_iv_asymptotic(nu, x)


def log_norm_const(kappa: float, dim: int) -> float:
    """log Z[kappa] for the vMF density Z[kappa] * exp(kappa * x.mu) on S^(dim-1).

    Z[kappa] = kappa^(d/2-1) / ((2 pi)^(d/2) I_(d/2-1)(kappa)); the kappa -> 0
    limit is the reciprocal surface area of the sphere.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if kappa == 0.0:
        # 1 / area(S^(d-1)) = Gamma(d/2) / (2 pi^(d/2))
        return math.lgamma(dim / 2.0) - math.log(2.0) - (dim / 2.0) * math.log(math.pi)
    nu = dim / 2.0 - 1.0
    return (
        nu * math.log(kappa)
        - (dim / 2.0) * math.log(2.0 * math.pi)
        - log_bessel_iv(nu, kappa)
    )


@dataclass(frozen=True)
class VmfParams:
    """Mean direction and concentration of a vMF distribution."""

    mean: np.ndarray
    kappa: float
    dim: int = field(init=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.ndim != 1 or mean.shape[0] < 2:
            raise ValueError("mean must be a d-vector with d >= 2")
        if abs(np.linalg.norm(mean) - 1.0) > 1e-9:
            raise ValueError("mean must be unit-norm (tol 1e-9)")
        if not 0.0 <= self.kappa <= KAPPA_MAX:
            raise ValueError(f"kappa must be in [0, {KAPPA_MAX}]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "dim", int(mean.shape[0]))

    @property
    def log_z(self) -> float:
        return log_norm_const(self.kappa, self.dim)


def vmf_log_density(x: np.ndarray, params: VmfParams) -> float:
    """log p(x) = log Z[kappa] + kappa * (x . mean) for unit x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.mean.shape:
        raise ValueError("x and mean dimension mismatch")
    if abs(np.linalg.norm(x) - 1.0) > 1e-6:
        raise ValueError("x must be unit-norm (tol 1e-6)")
    return params.log_z + params.kappa * float(np.dot(x, params.mean))


def estimate_kappa(samples: np.ndarray) -> float:
    """Concentration estimate kappa_hat = Rbar*(d - Rbar^2)/(1 - Rbar^2).

    Rbar is the norm of the sample mean.  The estimate is clamped to
    [0, KAPPA_MAX]; numerically coincident samples (Rbar ~ 1) emit
    DegenerateSamplesWarning and return KAPPA_MAX.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("need at least 2 samples of shape (n, d)")
    d = samples.shape[1]
    rbar = float(np.linalg.norm(samples.mean(axis=0)))
    if rbar >= 1.0 - 1e-12:
        warnings.warn(
            "mean resultant length ~ 1; kappa clamped to KAPPA_MAX",
            DegenerateSamplesWarning,
        )
        return KAPPA_MAX
    kappa = rbar * (d - rbar * rbar) / (1.0 - rbar * rbar)
    return float(min(max(kappa, 0.0), KAPPA_MAX))


def _sample_weights(kappa, dim, n, rng):
    """Wood's rejection sampler for the mu-component w of a vMF draw."""
    b = (dim - 1.0) / (math.sqrt(4.0 * kappa * kappa + (dim - 1.0) ** 2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (dim - 1.0) * math.log(1.0 - x0 * x0)
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        todo = n - filled
        z = rng.beta((dim - 1.0) / 2.0, (dim - 1.0) / 2.0, size=todo)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=todo)
        ok = kappa * w + (dim - 1.0) * np.log(1.0 - x0 * w) - c >= np.log(u)
        k = int(np.count_nonzero(ok))
        out[filled : filled + k] = w[ok]
        filled += k
    return out


def _tangent_directions(means, rng):
    """Unit vectors orthogonal to each row of means (n, d)."""
    z = rng.standard_normal(means.shape)
    z -= np.sum(z * means, axis=1, keepdims=True) * means
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    # A zero tangent has probability zero; regenerate defensively.
    bad = norms[:, 0] < 1e-12
    while np.any(bad):
        z[bad] = rng.standard_normal((int(bad.sum()), means.shape[1]))
        z[bad] -= np.sum(z[bad] * means[bad], axis=1, keepdims=True) * means[bad]
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
    return z / norms


def sample_vmf(params: VmfParams, rng: np.random.Generator, n: int | None = None):
    """Draw from vMF(mean, kappa).  Returns (d,) for n=None, else (n, d)."""
    size = 1 if n is None else int(n)
    means = np.broadcast_to(params.mean, (size, params.dim))
    out = sample_vmf_stack(np.array(means), params.kappa, rng)
    return out[0] if n is None else out


def sample_vmf_stack(means: np.ndarray, kappa: float, rng: np.random.Generator):
    """One vMF draw per row of means (n, d), all with common concentration."""
    means = np.asarray(means, dtype=np.float64)
    n, d = means.shape
    if kappa == 0.0:
        z = rng.standard_normal((n, d))
        return z / np.linalg.norm(z, axis=1, keepdims=True)
    w = _sample_weights(kappa, d, n, rng)[:, None]
    v = _tangent_directions(means, rng)
    out = w * means + np.sqrt(np.maximum(1.0 - w * w, 0.0)) * v
    return out / np.linalg.norm(out, axis=1, keepdims=True)
