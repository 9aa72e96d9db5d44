"""Quadratic-polynomial test functions with analytic derivatives.

Restricting weak-equation checks to f(x) = c0 + c1'x + x' C2 x keeps the
generator evaluation exact (no numerical differentiation inside a
correctness test).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedTestFunction


@dataclass(frozen=True)
class QuadraticPolynomial:
    """f(x) = c0 + c1'x + x' C2 x with C2 symmetric."""

    c0: float
    c1: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        c1 = np.atleast_1d(np.asarray(self.c1, dtype=float))
        c2 = np.atleast_2d(np.asarray(self.c2, dtype=float))
        if c2.shape != (c1.size, c1.size):
            raise UnsupportedTestFunction("c2 must be square and match c1")
        object.__setattr__(self, "c1", c1)
        object.__setattr__(self, "c2", 0.5 * (c2 + c2.T))

    @property
    def dim(self) -> int:
        return self.c1.size

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.c0 + x @ self.c1 + np.einsum("...i,ij,...j->...", x, self.c2, x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.c1 + 2.0 * x @ self.c2

    def hessian(self) -> np.ndarray:
        return 2.0 * self.c2

    def gaussian_mean(self, mean: np.ndarray, cov: np.ndarray) -> float:
        """E[f(X)] for X ~ N(mean, cov)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return float(
            self.c0 + mean @ self.c1
            + np.trace(self.c2 @ cov) + mean @ self.c2 @ mean
        )

    def gaussian_state_cov(self, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
        """Cov(X, f(X)) = cov (c1 + 2 C2 mean) for X Gaussian (Stein identity)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cov @ (self.c1 + 2.0 * self.c2 @ mean)


def as_quadratic(f, dim: int) -> QuadraticPolynomial:
    """Coerce f into a QuadraticPolynomial of the given state dimension.

    Accepts a QuadraticPolynomial, a (c0, c1, c2) triple, or the shorthand
    strings "1", "x", "x2" (scalar models only). Anything else raises
    UnsupportedTestFunction.
    """
    if isinstance(f, QuadraticPolynomial):
        if f.dim != dim:
            raise UnsupportedTestFunction(f"test function has dim {f.dim}, model has {dim}")
        return f
    if isinstance(f, str):
        if dim != 1:
            raise UnsupportedTestFunction("string shorthands only apply to scalar models")
        table = {
            "1": QuadraticPolynomial(1.0, np.zeros(1), np.zeros((1, 1))),
            "x": QuadraticPolynomial(0.0, np.ones(1), np.zeros((1, 1))),
            "x2": QuadraticPolynomial(0.0, np.zeros(1), np.ones((1, 1))),
        }
        if f not in table:
            raise UnsupportedTestFunction(f"unknown shorthand {f!r}")
        return table[f]
    if isinstance(f, (tuple, list)) and len(f) == 3:
        return as_quadratic(QuadraticPolynomial(float(f[0]), f[1], f[2]), dim)
    raise UnsupportedTestFunction(
        "test functions must be quadratic polynomials (QuadraticPolynomial, "
        "(c0, c1, c2) triple, or '1'/'x'/'x2')"
    )
