"""Nuisance coefficients of corrected moments and the error-moment recursions.

The bias-correction coefficient of each derivative term is a triangular
function of the raw error moments: the order-2 and order-3 coefficients are
mu_k/k!, and higher orders subtract the corrections-of-corrections
recursively.  The mapping is invertible, so moment restrictions translate
directly into nuisance restrictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .moments import MultiIndex, multi_index_set


class SchemeError(ValueError):
    """Invalid correction-scheme configuration or nuisance layout."""


@dataclass(frozen=True)
class VFamily:
    """Parametric family for conditional error moments v_k(x, s, omega).

    ``v(k, x, s, omega)`` returns the length-n vector of the k-th conditional
    moment; ``dv_dx(k, order, x, s, omega)`` its x-derivative.  v2 should be
    non-negative on the data range for admissible omega.
    """

    dim_omega: int
    v: callable
    dv_dx: callable
    name: str = "custom"
    omega_labels: tuple[str, ...] = ()


def exponential_v_family(K: int) -> VFamily:
    """Conditional moments v_k(x, s, omega) = omega_k * exp(k * omega_1 * x).

    Covers multiplicative heteroskedastic errors eps = exp(omega_1 x*) zeta
    with zeta independent of (x*, s); omega_1 = 0 reduces to the classical
    case with constant moments.
    """
    if not 2 <= K <= 4:
        raise SchemeError("exponential v-family supports 2 <= K <= 4")

    def v(k, x, s, omega):
        if not 2 <= k <= K:
            raise SchemeError(f"v_{k} outside family range 2..{K}")
        return omega[k - 1] * np.exp(k * omega[0] * x[:, 0])

    def dv_dx(k, order, x, s, omega):
        return (k * omega[0]) ** order * v(k, x, s, omega)

    labels = ("omega1",) + tuple(f"omega{k}" for k in range(2, K + 1))
    return VFamily(dim_omega=K, v=v, dv_dx=dv_dx, name="exponential", omega_labels=labels)


@dataclass(frozen=True)
class CorrectionScheme:
    """Which error regime and expansion order the corrected moments use.

    regime is one of ``classical_scalar``, ``classical_multivariate``, or
    ``weakly_classical``; K >= 2 is the expansion order.  The multivariate
    regime prunes nuisance entries listed in ``zero_mask`` (multi-indices whose
    coefficient is a priori zero, e.g. under independent error coordinates).
    """

    regime: str
    K: int
    d: int = 1
    zero_mask: tuple[tuple[int, ...], ...] = ()
    v_family: Optional[VFamily] = None

    def __post_init__(self):
        if self.K < 2:
            raise SchemeError("K must be >= 2")
        if self.regime not in (
            "classical_scalar",
            "classical_multivariate",
            "weakly_classical",
        ):
            raise SchemeError(f"unknown regime {self.regime!r}")
        if self.regime == "classical_scalar" and self.d != 1:
            raise SchemeError("classical_scalar requires d = 1")
        if self.regime == "classical_multivariate" and self.d < 1:
            raise SchemeError("d must be >= 1")
        if self.regime == "weakly_classical":
            if self.v_family is None:
                raise SchemeError("weakly_classical requires a v_family")
            if self.K > 4:
                raise SchemeError("weakly_classical correction supports K <= 4 only")
            if self.d != 1:
                raise SchemeError("weakly_classical requires d = 1")
        mask = tuple(tuple(int(v) for v in k) for k in self.zero_mask)
        object.__setattr__(self, "zero_mask", mask)

    def kappas(self) -> list[MultiIndex]:
        """Nuisance layout: the derivative multi-indices carrying coefficients."""
        if self.regime == "classical_scalar":
            return [MultiIndex((k,)) for k in range(2, self.K + 1)]
        if self.regime == "classical_multivariate":
            out = []
            for k in range(2, self.K + 1):
                for kappa in multi_index_set(self.d, k):
                    if kappa.kappa not in self.zero_mask:
                        out.append(kappa)
            return out
        raise SchemeError("weakly_classical has an omega layout, not a kappa layout")

    @property
    def nuisance_dim(self) -> int:
        if self.regime == "weakly_classical":
            return self.v_family.dim_omega
        return len(self.kappas())

    def nuisance_labels(self) -> tuple[str, ...]:
        if self.regime == "classical_scalar":
            return tuple(f"gamma{k}" for k in range(2, self.K + 1))
        if self.regime == "classical_multivariate":
            return tuple("gamma" + "".join(map(str, k.kappa)) for k in self.kappas())
        return self.v_family.omega_labels or tuple(
            f"omega{i+1}" for i in range(self.v_family.dim_omega)
        )


@dataclass(frozen=True)
class GammaVector:
    """Nuisance coefficients keyed by derivative order (or multi-index)."""

    scheme: CorrectionScheme
    values: np.ndarray

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        if self.scheme.regime == "weakly_classical":
            raise SchemeError("weakly_classical nuisances are omega vectors")
        if vals.shape != (self.scheme.nuisance_dim,):
            raise SchemeError(
                f"gamma has shape {vals.shape}, scheme needs ({self.scheme.nuisance_dim},)"
            )
        if not np.all(np.isfinite(vals)):
            raise SchemeError("gamma values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __getitem__(self, key) -> float:
        if isinstance(key, int):
            key = MultiIndex((key,)) if self.scheme.d == 1 else MultiIndex(key)
        elif isinstance(key, tuple):
            key = MultiIndex(key)
        for kappa, v in zip(self.scheme.kappas(), self.values):
            if kappa.kappa == key.kappa:
                return float(v)
        raise KeyError(key)

    def items(self):
        return list(zip(self.scheme.kappas(), self.values))


@dataclass(frozen=True)
class ErrorMomentSet:
    """Raw moments of the measurement error, orders 2..K (mean-zero imposed).

    Scalar case: ``mu[(k,)] = E[eps^k]``.  Multivariate: ``mu[kappa]`` is the
    mixed moment over coordinates.  Diagonal second moments must be
    non-negative and, where fourth moments are present, satisfy
    E[eps_j^4] >= E[eps_j^2]^2.
    """

    d: int
    K: int
    mu: Mapping[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for key, val in dict(self.mu).items():
            kappa = MultiIndex(tuple(key) if isinstance(key, (tuple, list)) else (key,))
            if len(kappa) != self.d:
                raise SchemeError(f"moment key {key} has wrong dimension")
            if not 2 <= kappa.order <= self.K:
                raise SchemeError(f"moment order {kappa.order} outside 2..{self.K}")
            clean[kappa.kappa] = float(val)
        object.__setattr__(self, "mu", clean)

    def validate(self) -> None:
        for j in range(self.d):
            e2 = tuple(2 if i == j else 0 for i in range(self.d))
            e4 = tuple(4 if i == j else 0 for i in range(self.d))
            mu2 = self.mu.get(e2)
            if mu2 is not None and mu2 < 0:
                raise SchemeError(f"second moment {e2} is negative")
            mu4 = self.mu.get(e4)
            if mu2 is not None and mu4 is not None and mu4 < mu2**2 - 1e-12 * max(1.0, mu2**2):
                raise SchemeError(f"fourth moment {e4} violates E[e^4] >= E[e^2]^2")

    def get(self, kappa: MultiIndex) -> float:
        if kappa.order == 0:
            return 1.0
        if kappa.order == 1:
            return 0.0  # location normalization E[eps] = 0
        try:
            return self.mu[kappa.kappa]
        except KeyError:
            raise SchemeError(f"missing error moment for {kappa.kappa}") from None

    @classmethod
    def scalar(cls, moments: Sequence[float], K: int | None = None) -> "ErrorMomentSet":
        """Build from [mu_2, ..., mu_K]."""
        moments = list(moments)
        K = K or len(moments) + 1
        return cls(d=1, K=K, mu={(k,): m for k, m in zip(range(2, K + 1), moments)})


def gaussian_moments(sigma: float, K: int) -> ErrorMomentSet:
    """Raw moments of N(0, sigma^2) up to order K (odd orders zero)."""
    mu = {}
    for k in range(2, K + 1):
        mu[(k,)] = 0.0 if k % 2 else sigma**k * math.prod(range(k - 1, 0, -2))
    return ErrorMomentSet(d=1, K=K, mu=mu)


def gamma_from_moments(mu: ErrorMomentSet, K: int) -> GammaVector:
    """Coefficients gamma_2..gamma_K implied by scalar error moments.

    gamma_2 = mu_2/2, gamma_3 = mu_3/6, and for k >= 4 each coefficient
    subtracts the lower-order corrections:
    gamma_k = mu_k/k! - sum_{l=2}^{k-2} mu_{k-l}/(k-l)! * gamma_l.
    """
    if K < 2:
        raise SchemeError("K must be >= 2")
    if mu.d != 1:
        raise SchemeError("gamma_from_moments is the scalar recursion; use gamma_multivariate")
    mu.validate()
    gam: dict[int, float] = {}
    for k in range(2, K + 1):
        val = mu.get(MultiIndex((k,))) / math.factorial(k)
        for ell in range(2, k - 1):
            val -= mu.get(MultiIndex((k - ell,))) / math.factorial(k - ell) * gam[ell]
        gam[k] = val
    scheme = CorrectionScheme(regime="classical_scalar", K=K)
    return GammaVector(scheme, np.array([gam[k] for k in range(2, K + 1)]))


def moments_from_gamma(gamma: GammaVector) -> ErrorMomentSet:
    """Invert the coefficient recursion back to raw error moments."""
    scheme = gamma.scheme
    if scheme.regime == "classical_scalar":
        K = scheme.K
        mu: dict[tuple[int, ...], float] = {}
        gam = {kap.kappa[0]: float(v) for kap, v in gamma.items()}

        def mu_of(order: int) -> float:
            if order == 0:
                return 1.0
            if order == 1:
                return 0.0
            return mu[(order,)]

        for k in range(2, K + 1):
            acc = gam[k]
            for ell in range(2, k - 1):
                acc += mu_of(k - ell) / math.factorial(k - ell) * gam[ell]
            mu[(k,)] = acc * math.factorial(k)
        return ErrorMomentSet(d=1, K=K, mu=mu)
    if scheme.regime == "classical_multivariate":
        mu = {}
        gam = {kap.kappa: float(v) for kap, v in gamma.items()}
        for kap in scheme.zero_mask:
            gam[kap] = 0.0

        def mu_of_kappa(rest: MultiIndex) -> float:
            if rest.order == 0:
                return 1.0
            if rest.order == 1:
                return 0.0
            if rest.kappa in mu:
                return mu[rest.kappa]
            return _masked_zero(scheme, rest)

        for k in range(2, scheme.K + 1):
            for kappa in multi_index_set(scheme.d, k):
                if kappa.kappa in scheme.zero_mask:
                    continue
                acc = gam[kappa.kappa]
                for ell in range(2, k - 1):
                    for kt in multi_index_set(scheme.d, ell):
                        if not MultiIndex(kt.kappa) <= kappa:
                            continue
                        rest = kappa - kt
                        acc += mu_of_kappa(rest) / rest.factorial * gam[kt.kappa]
                mu[kappa.kappa] = acc * kappa.factorial
        return ErrorMomentSet(d=scheme.d, K=scheme.K, mu=mu)
    raise SchemeError("weakly_classical has no moment inversion")


def _masked_zero(scheme: CorrectionScheme, kappa: MultiIndex) -> float:
    if kappa.kappa in scheme.zero_mask:
        return 0.0
    raise SchemeError(f"missing moment for {kappa.kappa}")


def gamma_multivariate(
    mu: ErrorMomentSet, K: int, d: int, zero_mask: Sequence[Sequence[int]] = ()
) -> GammaVector:
    """Multi-index coefficient recursion for vector mismeasured covariates.

    gamma_kappa = mu_kappa/kappa! for |kappa| in {2, 3}; for |kappa| >= 4 it
    subtracts, over every split kappa = kt + (kappa - kt) with 2 <= |kt| <=
    |kappa| - 2, the term mu_{kappa-kt}/(kappa-kt)! * gamma_kt.
    """
    if K < 2:
        raise SchemeError("K must be >= 2")
    if mu.d != d:
        raise SchemeError(f"moment set has d={mu.d}, expected {d}")
    mu.validate()
    scheme = CorrectionScheme(
        regime="classical_multivariate", K=K, d=d,
        zero_mask=tuple(tuple(int(v) for v in z) for z in zero_mask),
    )
    gam: dict[tuple[int, ...], float] = {}
    values = []
    for k in range(2, K + 1):
        for kappa in multi_index_set(d, k):
            if kappa.kappa in scheme.zero_mask:
                gam[kappa.kappa] = 0.0
                continue
            val = mu.get(kappa) / kappa.factorial
            for ell in range(2, k - 1):
                for kt in multi_index_set(d, ell):
                    if not MultiIndex(kt.kappa) <= kappa:
                        continue
                    rest = kappa - kt
                    val -= mu.get(rest) / rest.factorial * gam[kt.kappa]
            gam[kappa.kappa] = val
            values.append(val)
    return GammaVector(scheme, np.array(values))
