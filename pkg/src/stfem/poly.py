"""One-dimensional polynomial helpers on the reference interval [0, 1]."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss(n: int):
    """Gauss-Legendre rule with ``n`` points mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


class Lagrange1D:
    """Lagrange basis of degree ``p`` with equispaced nodes on [0, 1].

    ``coeffs[a, k]`` is the coefficient of tau**k in basis function a.
    """

    def __init__(self, p: int):
        self.p = p
        self.nodes = np.linspace(0.0, 1.0, p + 1)
        V = np.vander(self.nodes, p + 1, increasing=True)
        self.coeffs = np.linalg.inv(V).T.copy()
        k = np.arange(p + 1)
        self.dcoeffs = (self.coeffs * k)[:, 1:]

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        V = np.vander(tau.ravel(), self.p + 1, increasing=True)
        return (V @ self.coeffs.T).reshape(tau.shape + (self.p + 1,))

    def deriv(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.p == 0:
            return np.zeros(tau.shape + (1,))
        V = np.vander(tau.ravel(), self.p, increasing=True)
        return (V @ self.dcoeffs.T).reshape(tau.shape + (self.p + 1,))

    def divided_difference(self, tau, sigma):
        """(phi_a(tau) - phi_a(sigma)) / (tau - sigma), exact also on tau == sigma."""
        tau = np.asarray(tau, dtype=float).ravel()
        sigma = np.asarray(sigma, dtype=float).ravel()
        out = np.zeros((tau.size, self.p + 1))
        for k in range(1, self.p + 1):
            s = np.zeros(tau.size)
            for j in range(k):
                s += tau ** j * sigma ** (k - 1 - j)
            out += s[:, None] * self.coeffs[:, k][None, :]
        return out


@lru_cache(maxsize=None)
def lagrange(p: int) -> Lagrange1D:
    return Lagrange1D(p)


@lru_cache(maxsize=None)
def ref_matrices(p: int, q: int):
    """Reference matrices between degree-p (columns) and degree-q (rows) bases.

    Returns (mass, dmass, stiff) with
    mass[a, b] = int psi_a phi_b, dmass[a, b] = int psi_a phi_b',
    stiff[a, b] = int psi_a' phi_b'.
    """
    xg, wg = gauss(p + q + 2)
    phi, dphi = lagrange(p)(xg), lagrange(p).deriv(xg)
    psi, dpsi = lagrange(q)(xg), lagrange(q).deriv(xg)
    mass = (psi * wg[:, None]).T @ phi
    dmass = (psi * wg[:, None]).T @ dphi
    stiff = (dpsi * wg[:, None]).T @ dphi
    return mass, dmass, stiff
