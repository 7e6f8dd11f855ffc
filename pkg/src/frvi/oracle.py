"""Independent reference solvers at tiny scale.

For symmetric coefficients the constrained problem is the minimization of
the quadratic energy over the convex set |D^sigma u| <= g; this module
solves that program by operator splitting (alternating a prefactorized
linear step in u, a nodewise ball projection of the gradient target, and
a dual ascent), entirely independent of the penalization route.  An
unconstrained spectral / dense linear solver covers inactive cases.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .fields import ScalarField, VectorField, lp_norm
from .vi import (
    ProblemData,
    SolverDivergence,
    Threshold,
    _grad_arrays,
    _magnitude,
    _neg_div_arrays,
    energy,
    sample_feasible,
)
from .fracgrad import multiplier_table

ORACLE_NODE_LIMIT = 16384
DENSE_UNKNOWN_LIMIT = 4096


def project_ball(w: VectorField, g: Threshold) -> VectorField:
    """Nodewise Euclidean projection onto {|w(x)| <= g(x)}."""
    mag = w.magnitude()
    factor = np.where(mag > g.g.values, g.g.values / np.where(mag > 0, mag, 1.0), 1.0)
    return VectorField(w.grid, tuple(factor * c for c in w.components))


def _project_arrays(w: np.ndarray, gvals: np.ndarray) -> np.ndarray:
    mag = _magnitude(w)
    factor = np.where(mag > gvals, gvals / np.where(mag > 0, mag, 1.0), 1.0)
    return factor[None, ...] * w


class _DenseOperator:
    """Dense assembly of u -> P[-div^s(C D^s E u)] on the inside nodes."""

    def __init__(self, data: ProblemData):
        self.data = data
        self.grid = data.grid
        self.inside = data.mask.inside
        self.m = int(self.inside.sum())
        if self.m > DENSE_UNKNOWN_LIMIT:
            raise ValueError(
                f"too many unknowns for dense oracle ({self.m} inside nodes)")
        self.mat_a = self._assemble(lambda w: data.A.apply(w))
        self.mat_lap = self._assemble(lambda w: w)

    def _assemble(self, coeff_apply) -> np.ndarray:
        cols = np.zeros((self.m, self.m))
        basis = np.zeros(self.grid.shape)
        idx = np.argwhere(self.inside)
        for j, node in enumerate(idx):
            basis[tuple(node)] = 1.0
            w = _grad_arrays(basis, self.grid, self.data.sigma)
            out = _neg_div_arrays(coeff_apply(w), self.grid, self.data.sigma)
            cols[:, j] = out[self.inside]
            basis[tuple(node)] = 0.0
        return cols

    def system(self, rho: float) -> np.ndarray:
        return self.mat_a + rho * self.mat_lap


def oracle_solve_pde(data: ProblemData) -> ScalarField:
    """Unconstrained linear solve; errors out if the constraint turns out
    to be active.  Full-torus constant scalar coefficients go through exact
    spectral inversion, masked domains through a dense factorization."""
    grid = data.grid
    if data.mask.is_full and data.A.is_scalar and np.ptp(data.A.values) == 0.0:
        a = float(data.A.values.flat[0])
        _, mag_sigma = multiplier_table(grid, data.sigma)
        mult = mag_sigma**2
        fhat = np.fft.fftn(data.f.values)
        with np.errstate(divide="ignore", invalid="ignore"):
            uhat = np.where(mult > 0.0, fhat / (a * np.where(mult > 0, mult, 1.0)), 0.0)
        u_vals = np.fft.ifftn(uhat).real
    else:
        if grid.num_nodes > DENSE_UNKNOWN_LIMIT:
            raise ValueError("masked dense solve limited to 4096 nodes")
        op = _DenseOperator(data)
        rhs = data.f.values[data.mask.inside]
        x = np.linalg.solve(op.mat_a, rhs)
        u_vals = np.zeros(grid.shape)
        u_vals[data.mask.inside] = x
    u = ScalarField(grid, u_vals)
    # residual check
    w = _grad_arrays(u.values, grid, data.sigma)
    r = _neg_div_arrays(data.A.apply(w), grid, data.sigma) - data.f.values
    r = np.where(data.mask.inside, r, 0.0)
    fnorm = lp_norm(data.f, 2)
    if float(np.abs(r).max()) > 1e-10 * max(1.0, fnorm):
        raise SolverDivergence("linear oracle residual too large")
    if float((_magnitude(w) - data.g.g.values).max()) >= 0.0:
        raise ValueError("constraint active: use the constrained path")
    return u


def oracle_solve_vi(data: ProblemData, rho: float = 1.0, tol: float = 1e-9,
                    max_iter: int = 4000) -> ScalarField:
    """Splitting solve of the symmetric constrained program.

    Alternates: (i) linear solve in u with the gradient target w and dual y
    fixed, (ii) ball projection for w, (iii) dual ascent; rho is rebalanced
    by factors of two when the primal and dual residuals drift apart.
    """
    if not data.A.is_symmetric:
        raise ValueError("oracle requires symmetric coefficients")
    grid = data.grid
    if grid.num_nodes > ORACLE_NODE_LIMIT:
        raise ValueError("grid too large for the oracle")
    op = _DenseOperator(data)
    inside = data.mask.inside
    f_in = data.f.values[inside]
    gvals = data.g.g.values
    sigma = data.sigma

    shape = (grid.dim,) + grid.shape
    w = np.zeros(shape)
    y = np.zeros(shape)
    factor = cho_factor(op.system(rho))
    w_scale_ref = 1.0
    since_refactor = 0
    for it in range(max_iter):
        rhs = f_in + _neg_div_arrays(w - y, grid, sigma)[inside] * rho
        x = cho_solve(factor, rhs)
        u_vals = np.zeros(grid.shape)
        u_vals[inside] = x
        du = _grad_arrays(u_vals, grid, sigma)
        w_old = w
        w = _project_arrays(du + y, gvals)
        y = y + du - w
        hN = grid.cell_volume
        primal = float(np.sqrt(hN * np.sum((du - w) ** 2)))
        dual_field = _neg_div_arrays(w - w_old, grid, sigma)[inside]
        dual = rho * float(np.sqrt(hN * np.sum(dual_field**2)))
        scale = 1.0 + float(np.sqrt(hN * np.sum(du**2)))
        if primal <= tol * scale and dual <= tol * scale:
            return ScalarField(grid, u_vals)
        since_refactor += 1
        if since_refactor >= 10:
            if primal > 10.0 * dual:
                rho *= 2.0
                y = y / 2.0
                factor = cho_factor(op.system(rho))
                since_refactor = 0
            elif dual > 10.0 * primal:
                rho /= 2.0
                y = y * 2.0
                factor = cho_factor(op.system(rho))
                since_refactor = 0
    raise SolverDivergence(
        f"splitting oracle: max_iter={max_iter} reached "
        f"(primal {primal:.3e}, dual {dual:.3e})",
        iterate=ScalarField(grid, u_vals))


def certify_minimum(u: ScalarField, data: ProblemData, samples: int = 1000,
                    tol: float = 1e-9, seed: int = 17) -> bool:
    """Check J(u) <= J(v) + tol*scale against sampled feasible v."""
    rng = np.random.default_rng(seed)
    ju = energy(u, data)
    scale = abs(ju) + 1.0
    for _ in range(samples):
        v = sample_feasible(data, rng)
        if energy(v, data) < ju - tol * scale:
            return False
    return True
