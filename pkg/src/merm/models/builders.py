"""Assemble moment specs from scalar residual blocks times polynomial bases.

A block is (u, phi): the moment rows are u(x, s, theta) * phi(x, s).  All
x-derivatives follow from the Leibniz rule, with the basis differentiated in
closed form and the residual through its own derivative closures.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..corrected import ScalarMomentFn
from ..moments import AnalyticProvider, MomentSpec
from .bases import PolyBasis


def build_product_spec(
    blocks: Sequence[tuple[ScalarMomentFn, PolyBasis]],
    dim_theta: int,
    required_columns: Sequence[str] = (),
    max_order: int = 6,
    meta: dict | None = None,
) -> MomentSpec:
    blocks = list(blocks)
    m = sum(len(phi) for _, phi in blocks)

    def eval_fn(x, s, theta):
        parts = [u.value(x, s, theta)[:, None] * phi.value(x, s, 0) for u, phi in blocks]
        return np.concatenate(parts, axis=1)

    def deriv_x_fn(x, s, theta, kappa):
        k = kappa.kappa[0]
        parts = []
        for u, phi in blocks:
            acc = np.zeros((x.shape[0], len(phi)))
            for j in range(k + 1):
                uj = u.value(x, s, theta) if j == 0 else u.dx(x, s, theta, j)
                acc += math.comb(k, j) * uj[:, None] * phi.value(x, s, k - j)
            parts.append(acc)
        return np.concatenate(parts, axis=1)

    def dtheta_fn(x, s, theta):
        parts = [
            u.dtheta(x, s, theta)[:, None, :] * phi.value(x, s, 0)[:, :, None]
            for u, phi in blocks
        ]
        return np.concatenate(parts, axis=1)

    def deriv_x_dtheta_fn(x, s, theta, kappa):
        k = kappa.kappa[0]
        parts = []
        for u, phi in blocks:
            acc = np.zeros((x.shape[0], len(phi), theta.size))
            for j in range(k + 1):
                uj = u.dtheta(x, s, theta) if j == 0 else u.dx_dtheta(x, s, theta, j)
                acc += math.comb(k, j) * uj[:, None, :] * phi.value(x, s, k - j)[:, :, None]
            parts.append(acc)
        return np.concatenate(parts, axis=1)

    def mean_deriv_x_dtheta_fn(x, s, theta, kappa):
        # mean over rows without materializing the (n, m, p) tensor
        k = kappa.kappa[0]
        n = x.shape[0]
        parts = []
        for u, phi in blocks:
            acc = np.zeros((len(phi), theta.size))
            for j in range(k + 1):
                uj = u.dtheta(x, s, theta) if j == 0 else u.dx_dtheta(x, s, theta, j)
                acc += math.comb(k, j) / n * np.einsum(
                    "nm,np->mp", phi.value(x, s, k - j), uj
                )
            parts.append(acc)
        return np.concatenate(parts, axis=0)

    def mean_dtheta_fn(x, s, theta):
        n = x.shape[0]
        parts = [
            np.einsum("nm,np->mp", phi.value(x, s, 0), u.dtheta(x, s, theta)) / n
            for u, phi in blocks
        ]
        return np.concatenate(parts, axis=0)

    provider = AnalyticProvider(
        eval_fn, deriv_x_fn, max_order=max_order,
        dtheta_fn=dtheta_fn, deriv_x_dtheta_fn=deriv_x_dtheta_fn,
        mean_dtheta_fn=mean_dtheta_fn, mean_deriv_x_dtheta_fn=mean_deriv_x_dtheta_fn,
    )
    return MomentSpec(
        m=m, dim_theta=dim_theta, d=1, eval=eval_fn, deriv=provider,
        required_columns=tuple(required_columns), meta=meta or {},
    )
