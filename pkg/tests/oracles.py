"""Independent brute-force oracles used to check the library's fast paths.

These intentionally avoid the recursions under test: the coefficient oracle
solves the lower-triangular linear system in the standardized moments
directly, and the moment generator produces exact moments of small discrete
distributions so every moment set is realizable.
"""

from __future__ import annotations

import math

import numpy as np


def gamma_oracle_triangular(moments: dict[int, float], K: int) -> np.ndarray:
    """Solve B a = c in standardized moments, then rescale a_k by sigma^k.

    B[i, j] = E[(eps/sigma)^(k_i - l_j)] / (k_i - l_j)! for l_j <= k_i (rows
    and columns indexed by orders 2..K), c_i = E[(eps/sigma)^k_i] / k_i!.
    """
    sigma = math.sqrt(moments[2])

    def std_moment(j: int) -> float:
        if j == 0:
            return 1.0
        if j == 1:
            return 0.0
        return moments[j] / sigma**j

    orders = list(range(2, K + 1))
    q = len(orders)
    B = np.zeros((q, q))
    c = np.zeros(q)
    for i, k in enumerate(orders):
        c[i] = std_moment(k) / math.factorial(k)
        for j, ell in enumerate(orders):
            if ell <= k:
                B[i, j] = std_moment(k - ell) / math.factorial(k - ell)
    a = np.linalg.solve(B, c)
    return np.array([sigma**k * a_i for k, a_i in zip(orders, a)])


def discrete_error_moments(rng: np.random.Generator, K: int, atoms: int = 5) -> dict[int, float]:
    """Exact raw moments of a random mean-zero discrete distribution."""
    pts = rng.uniform(-2.0, 2.0, size=atoms)
    w = rng.dirichlet(np.ones(atoms))
    pts = pts - float(w @ pts)  # center so E[eps] = 0
    scale = math.sqrt(float(w @ pts**2))
    if scale < 1e-3:
        pts = pts + np.linspace(-1, 1, atoms)
        pts = pts - float(w @ pts)
        scale = math.sqrt(float(w @ pts**2))
    return {k: float(w @ pts**k) for k in range(2, K + 1)}


def symmetric_discrete_error_moments(rng: np.random.Generator, K: int, atoms: int = 4) -> dict[int, float]:
    """Moments of a symmetric discrete distribution (all odd moments zero)."""
    pts = rng.uniform(0.2, 2.0, size=atoms)
    w = rng.dirichlet(np.ones(atoms)) / 2.0
    full_pts = np.concatenate([pts, -pts])
    full_w = np.concatenate([w, w])
    out = {}
    for k in range(2, K + 1):
        out[k] = 0.0 if k % 2 else float(full_w @ full_pts**k)
    return out


def bivariate_error_moments(rng: np.random.Generator, K: int, atoms: int = 6,
                            independent: bool = False) -> dict[tuple[int, int], float]:
    """Exact mixed moments of a mean-zero bivariate discrete distribution."""
    if independent:
        m1 = discrete_error_moments(rng, K, atoms)
        m2 = discrete_error_moments(rng, K, atoms)
        m1[0], m1[1] = 1.0, 0.0
        m2[0], m2[1] = 1.0, 0.0
        out = {}
        for total in range(2, K + 1):
            for a in range(total, -1, -1):
                out[(a, total - a)] = m1[a] * m2[total - a]
        return out
    pts = rng.uniform(-1.5, 1.5, size=(atoms, 2))
    w = rng.dirichlet(np.ones(atoms))
    pts = pts - (w @ pts)[None, :]
    out = {}
    for total in range(2, K + 1):
        for a in range(total, -1, -1):
            b = total - a
            out[(a, b)] = float(w @ (pts[:, 0] ** a * pts[:, 1] ** b))
    return out
