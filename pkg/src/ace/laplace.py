"""Laplace latent densities, inverse-CDF sampling, and the generative error.

The latent prior is Laplace(0, sqrt(0.5)), which has unit variance.  The
conditional posterior is parametrized as Laplace(mu, sigma * sqrt(0.5)) so
that (mu, sigma) = (0, 1) coincides with the prior.

``generative_error`` evaluates the closed-form divergence used by the
training objective verbatim:

    -ln(s2/s1) + |m1-m2| / (sqrt(0.5)*s2)
        + (s1/s2) * exp(-|m1-m2| / (s1*sqrt(0.5))) - 1

``quadrature_kl`` computes the true KL divergence D(Lap1 || Lap2) by adaptive
composite Simpson integration and serves as the independent oracle.  The two
differ by 2*ln(s1/s2) when the scales differ (the closed form's leading log
has the opposite sign); they coincide when s1 == s2.  The discrepancy is
surfaced by :func:`discrepancy_report` rather than silently corrected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class LaplaceParams:
    """Location/scale pair of a one-dimensional Laplace density."""

    mu: float
    b: float

    def __post_init__(self):
        if not (self.b > 0.0 and math.isfinite(self.b)):
            raise ValueError(f"Laplace scale must be positive and finite, got {self.b}")


@dataclass(frozen=True)
class PosteriorParams:
    """(mu, sigma) with realized Laplace scale b = sigma * sqrt(0.5)."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0.0 and math.isfinite(self.sigma)):
            raise ValueError(f"posterior sigma must be positive and finite, got {self.sigma}")

    def to_laplace(self) -> LaplaceParams:
        return LaplaceParams(self.mu, self.sigma * SQRT_HALF)


def prior() -> PosteriorParams:
    """Unit-variance latent prior: Laplace(0, sqrt(0.5))."""
    return PosteriorParams(0.0, 1.0)


def density(z, p: LaplaceParams):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.abs(z - p.mu) / p.b) / (2.0 * p.b)


def log_density(z, p: LaplaceParams):
    z = np.asarray(z, dtype=np.float64)
    return -np.abs(z - p.mu) / p.b - math.log(2.0 * p.b)


def cdf(z, p: LaplaceParams):
    z = np.asarray(z, dtype=np.float64)
    u = (z - p.mu) / p.b
    return np.where(u < 0, 0.5 * np.exp(u), 1.0 - 0.5 * np.exp(-u))


def standard_sample(u):
    """Inverse-CDF map of the standard Laplace: s(u) = -sign(u-1/2) ln(1-2|u-1/2|)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    half = u - 0.5
    return -np.sign(half) * np.log1p(-2.0 * np.abs(half))


def sample(u, p: LaplaceParams):
    """z = mu + b * s(u); affine in (mu, b) for a fixed draw."""
    return p.mu + p.b * standard_sample(u)


# -- generative error ---------------------------------------------------------


def generative_error(post: PosteriorParams, target: PosteriorParams) -> float:
    """Closed-form divergence of the posterior from the generation-time density."""
    m1, s1 = post.mu, post.sigma
    m2, s2 = target.mu, target.sigma
    d = abs(m1 - m2)
    return -math.log(s2 / s1) + d / (SQRT_HALF * s2) + (s1 / s2) * math.exp(-d / (s1 * SQRT_HALF)) - 1.0


def generative_error_graph(mu: T.Tensor, sigma: T.Tensor, target_mu, target_sigma) -> T.Tensor:
    """Tape version of the closed form, elementwise over [B, D] heads.

    Targets are constants.  The |mu - mu2| kink uses subgradient 0, so the
    attained minimum mu == mu2 is a stable point.
    """
    m2 = np.asarray(target_mu, dtype=np.float64)
    s2 = np.asarray(target_sigma, dtype=np.float64)
    if np.any(s2 <= 0.0):
        raise ValueError("target sigma must be positive")
    delta = T.absolute(mu - T.constant(m2))
    log_term = T.log(sigma) - T.constant(np.log(s2))
    lin_term = delta * T.constant(1.0 / (SQRT_HALF * s2))
    exp_term = (sigma * T.constant(1.0 / s2)) * T.exp(-(delta * (1.0 / SQRT_HALF)) / sigma)
    return log_term + lin_term + exp_term - 1.0


# -- quadrature oracle ---------------------------------------------------------


def _simpson_piece(f, lo: float, hi: float, tol: float, max_doublings: int = 24) -> float:
    """Composite Simpson with interval doubling until |S_2n - S_n| < tol."""
    if hi <= lo:
        return 0.0
    n = 8
    xs = np.linspace(lo, hi, n + 1)
    fx = f(xs)
    h = (hi - lo) / n
    trap = h * (fx[0] / 2.0 + fx[1:-1].sum() + fx[-1] / 2.0)
    simpson = None
    for it in range(max_doublings):
        mids = (xs[:-1] + xs[1:]) / 2.0
        fm = f(mids)
        trap_fine = trap / 2.0 + (h / 2.0) * fm.sum()
        simpson_fine = (4.0 * trap_fine - trap) / 3.0
        if simpson is not None and it >= 3 and abs(simpson_fine - simpson) < tol:
            return simpson_fine
        merged = np.empty(xs.size + mids.size)
        merged[0::2] = xs
        merged[1::2] = mids
        merged_f = np.empty_like(merged)
        merged_f[0::2] = fx
        merged_f[1::2] = fm
        xs, fx = merged, merged_f
        trap = trap_fine
        h /= 2.0
        simpson = simpson_fine
    return simpson if simpson is not None else trap


def quadrature_kl(post: PosteriorParams, target: PosteriorParams, tol: float = 1e-9) -> float:
    """KL divergence D(Lap(m1, s1*sqrt(.5)) || Lap(m2, s2*sqrt(.5))) by Simpson quadrature.

    Integrates p1 * (ln p1 - ln p2) over [min mu - 40 max b, max mu + 40 max b],
    split at both density kinks; tail mass beyond 40 scales is negligible
    against the 1e-9 tolerance.
    """
    p1 = post.to_laplace()
    p2 = target.to_laplace()
    b_max = max(p1.b, p2.b)
    lo = min(p1.mu, p2.mu) - 40.0 * b_max
    hi = max(p1.mu, p2.mu) + 40.0 * b_max
    knots = sorted({lo, p1.mu, p2.mu, hi})

    def integrand(z):
        return density(z, p1) * (log_density(z, p1) - log_density(z, p2))

    pieces = [(a, b) for a, b in zip(knots[:-1], knots[1:]) if b > a]
    return float(sum(_simpson_piece(integrand, a, b, tol / max(len(pieces), 1)) for a, b in pieces))


def discrepancy_report(mus, sigmas, tol: float = 1e-9) -> list[dict]:
    """Map closed form vs quadrature KL over a (mu1, mu2, sigma1, sigma2) grid.

    Returns one row per grid point with both values and their difference;
    regions where the closed form disagrees with (or goes below) the true KL
    are recorded here, never corrected in the training path.
    """
    rows = []
    for m1 in mus:
        for m2 in mus:
            for s1 in sigmas:
                for s2 in sigmas:
                    post = PosteriorParams(float(m1), float(s1))
                    target = PosteriorParams(float(m2), float(s2))
                    closed = generative_error(post, target)
                    quad = quadrature_kl(post, target, tol=tol)
                    rows.append(
                        {
                            "mu1": float(m1),
                            "mu2": float(m2),
                            "sigma1": float(s1),
                            "sigma2": float(s2),
                            "closed_form": closed,
                            "quadrature_kl": quad,
                            "difference": closed - quad,
                        }
                    )
    return rows


def write_discrepancy_report(rows: list[dict], path):
    cols = ["mu1", "mu2", "sigma1", "sigma2", "closed_form", "quadrature_kl", "difference"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(f"{row[c]:.17g}" for c in cols) + "\n")
