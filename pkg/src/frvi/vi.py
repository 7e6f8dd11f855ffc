"""Gradient-constrained variational inequality: problem data, exponential
penalization, semismooth Newton continuation, multiplier extraction and
diagnostics.

The constraint |D^sigma u| <= g is enforced by multiplying the fractional
gradient flux with the exponential penalty coefficient applied to the
pointwise excess |D^sigma u| - g, and driving the penalty parameter along
a geometric continuation schedule.  The discrete multiplier field is the
penalty coefficient at the final parameter; complementarity, feasibility
and residual diagnostics are recorded per continuation step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, bicgstab, cg

from .fields import (
    DomainMask,
    Grid,
    ScalarField,
    inner,
)
from .fracgrad import (
    assert_supported,
    hsigma_norm,
    multiplier_table,
    random_band_limited,
)

# Penalty parameter floor: exp(1/eps^2) must stay below the largest double
# (exponent <= ~709), hence eps >= 0.038.
EPS_FLOOR = 0.038


class SolverDivergence(RuntimeError):
    """Inner solver failed; carries the last iterate and residual history."""

    def __init__(self, message, iterate=None, history=None):
        super().__init__(message)
        self.iterate = iterate
        self.history = list(history or [])


@dataclass(frozen=True)
class EllipticCoefficients:
    """Coefficient A(x): scalar-isotropic field or full (not necessarily
    symmetric) matrix per node, with declared ellipticity bounds."""

    grid: Grid
    values: np.ndarray  # shape grid.shape (scalar) or grid.shape + (N, N)
    a_star: float
    a_upper: float

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if not 0.0 < self.a_star <= self.a_upper:
            raise ValueError("need 0 < a_star <= a_upper")
        if v.shape == self.grid.shape:
            object.__setattr__(self, "_scalar", True)
            if v.min() < self.a_star - 1e-12 or v.max() > self.a_upper + 1e-12:
                raise ValueError("scalar coefficient violates declared bounds")
        elif v.shape == self.grid.shape + (self.grid.dim, self.grid.dim):
            object.__setattr__(self, "_scalar", False)
            self._spot_check()
        else:
            raise ValueError(f"coefficient shape {v.shape} matches neither form")

    def _spot_check(self, samples: int = 100, seed: int = 2024):
        # random xi, eta per batch of nodes: A xi . xi >= a_* |xi|^2 and
        # |A xi . eta| <= a^* |xi||eta|
        rng = np.random.default_rng(seed)
        dim = self.grid.dim
        A = self.values.reshape(-1, dim, dim)
        for _ in range(samples):
            xi = rng.normal(size=dim)
            eta = rng.normal(size=dim)
            Axi = A @ xi
            low = Axi @ xi - self.a_star * (xi @ xi)
            if low.min() < -1e-9 * (xi @ xi):
                raise ValueError("coefficient violates lower ellipticity bound")
            up = np.abs(Axi @ eta) - self.a_upper * np.linalg.norm(xi) * np.linalg.norm(eta)
            if up.max() > 1e-9 * np.linalg.norm(xi) * np.linalg.norm(eta):
                raise ValueError("coefficient violates upper bound")

    @property
    def is_scalar(self) -> bool:
        return self._scalar

    @property
    def is_symmetric(self) -> bool:
        if self._scalar:
            return True
        return bool(np.array_equal(self.values, np.swapaxes(self.values, -1, -2)))

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Apply A(x) nodewise to a stacked vector field (N, *grid.shape)."""
        if self._scalar:
            return self.values[None, ...] * w
        return np.einsum("...ij,j...->i...", self.values, w)


def identity_coefficients(grid: Grid, scale: float = 1.0) -> EllipticCoefficients:
    return EllipticCoefficients(grid, np.full(grid.shape, float(scale)),
                                a_star=float(scale), a_upper=float(scale))


@dataclass(frozen=True)
class Threshold:
    """Constraint threshold g with certified lower bound nu > 0."""

    g: ScalarField
    nu: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("threshold lower bound violated")
        if float(self.g.values.min()) < self.nu - 1e-12 * self.nu:
            raise ValueError("threshold dips below its declared lower bound")

    def scaled(self, factor: float) -> "Threshold":
        return Threshold(ScalarField(self.g.grid, factor * self.g.values),
                         factor * self.nu)


@dataclass(frozen=True)
class ProblemData:
    """Data of one constrained problem: domain, order, coefficients,
    source supported in Omega, and threshold."""

    mask: DomainMask
    sigma: float
    A: EllipticCoefficients
    f: ScalarField
    g: Threshold

    def __post_init__(self):
        grid = self.mask.grid
        for obj, name in ((self.A.grid, "A"), (self.f.grid, "f"), (self.g.g.grid, "g")):
            if obj != grid:
                raise ValueError(f"{name} lives on a different grid")
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError("sigma must lie in (0, 1]")
        assert_supported(self.f, self.mask)

    @property
    def grid(self) -> Grid:
        return self.mask.grid

    def scaled(self, mu: float) -> "ProblemData":
        """Same problem with data (mu f, mu g)."""
        return ProblemData(self.mask, self.sigma, self.A,
                           ScalarField(self.grid, mu * self.f.values),
                           self.g.scaled(mu))


@dataclass(frozen=True)
class PenaltyConfig:
    eps0: float = 0.5
    ratio: float = 0.6
    eps_min: float = 0.04
    newton_tol: float = 1e-9
    newton_max: int = 80
    damping: float = 1.0

    def __post_init__(self):
        if self.eps_min < EPS_FLOOR:
            raise ValueError(
                f"eps_min {self.eps_min} below representability floor {EPS_FLOOR}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")
        if not self.eps_min <= self.eps0 < 1.0:
            raise ValueError("need eps_min <= eps0 < 1")
        if self.newton_tol <= 0 or self.newton_max < 1 or not 0 < self.damping <= 1:
            raise ValueError("invalid solver controls")

    def schedule(self) -> list:
        """Geometric continuation eps0 * ratio^j clipped to end at eps_min."""
        eps = [self.eps0]
        while eps[-1] * self.ratio > self.eps_min * (1 + 1e-12):
            eps.append(eps[-1] * self.ratio)
        if eps[-1] > self.eps_min * (1 + 1e-12):
            eps.append(self.eps_min)
        return eps


@dataclass
class PenaltyTraceRow:
    """Per-continuation-step monitored quantities."""

    eps: float
    newton_iters: int
    residual: float
    feas_violation: float
    comp_gap: float
    norm_dsu_l2: float
    k_eps_l1: float
    k_eps_dsu2_l1: float
    energy: float | None
    measure_u: float
    measure_v: float
    measure_w: float
    excess_integral: float


@dataclass
class VISolution:
    u: ScalarField
    multiplier: ScalarField
    eps_final: float
    feas_violation: float
    comp_gap: float
    vi_res: float
    energy: float | None
    trace: list = field(default_factory=list)


def penalty_value(s, eps: float):
    """Exponential penalty: 0 for s<0, e^(s/eps)-1 on [0, 1/eps], capped at
    e^(1/eps^2)-1 beyond.  Accepts scalars or arrays."""
    if not EPS_FLOOR <= eps < 1.0:
        raise ValueError(f"eps must lie in [{EPS_FLOOR}, 1), got {eps}")
    out = np.expm1(np.clip(s, 0.0, 1.0 / eps) / eps)
    if np.isscalar(s):
        return float(out)
    return out


def penalty_slope(s, eps: float):
    """Right-branch generalized derivative of the penalty (semismooth
    Newton convention at the kinks s=0 and s=1/eps)."""
    if not EPS_FLOOR <= eps < 1.0:
        raise ValueError(f"eps must lie in [{EPS_FLOOR}, 1), got {eps}")
    s_arr = np.asarray(s, dtype=float)
    inside = (s_arr >= 0.0) & (s_arr <= 1.0 / eps)
    out = np.where(inside, np.exp(np.clip(s_arr, 0.0, 1.0 / eps) / eps) / eps, 0.0)
    if np.isscalar(s):
        return float(out)
    return out


# -- spectral plumbing -------------------------------------------------------


def _grad_arrays(values: np.ndarray, grid: Grid, sigma: float) -> np.ndarray:
    comps, _ = multiplier_table(grid, sigma)
    vhat = np.fft.fftn(values)
    return np.stack([np.fft.ifftn(m * vhat).real for m in comps])


def _neg_div_arrays(w: np.ndarray, grid: Grid, sigma: float) -> np.ndarray:
    comps, _ = multiplier_table(grid, sigma)
    acc = np.zeros(grid.shape, dtype=complex)
    for m, c in zip(comps, w):
        acc += m * np.fft.fftn(c)
    return -np.fft.ifftn(acc).real


def _magnitude(w: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(w * w, axis=0))


def penalized_residual(u: ScalarField, data: ProblemData, eps: float) -> ScalarField:
    """Strong-form residual of the penalized quasilinear problem on Omega
    nodes (zero outside): -div^sigma[(k_eps + A) D^sigma u] - f."""
    assert_supported(u, data.mask)
    grid = data.grid
    w = _grad_arrays(u.values, grid, data.sigma)
    k = penalty_value(_magnitude(w) - data.g.g.values, eps)
    flux = k[None, ...] * w + data.A.apply(w)
    r = _neg_div_arrays(flux, grid, data.sigma) - data.f.values
    r = np.where(data.mask.inside, r, 0.0)
    return ScalarField(grid, r)


class _PenalizedSystem:
    """Matrix-free residual/Jacobian of the penalized problem restricted to
    the inside nodes."""

    def __init__(self, data: ProblemData, eps: float):
        self.data = data
        self.eps = eps
        self.grid = data.grid
        self.inside = data.mask.inside
        self.m = int(self.inside.sum())
        self.g = data.g.g.values
        self.f_inside = data.f.values[self.inside]

    def unpack(self, x: np.ndarray) -> np.ndarray:
        full = np.zeros(self.grid.shape)
        full[self.inside] = x
        return full

    def pack(self, full: np.ndarray) -> np.ndarray:
        return full[self.inside]

    def residual(self, x: np.ndarray) -> np.ndarray:
        w = _grad_arrays(self.unpack(x), self.grid, self.data.sigma)
        k = penalty_value(_magnitude(w) - self.g, self.eps)
        flux = k[None, ...] * w + self.data.A.apply(w)
        r = _neg_div_arrays(flux, self.grid, self.data.sigma)
        return self.pack(r) - self.f_inside

    def frozen_matvec(self, k: np.ndarray):
        """Linear operator with frozen penalty coefficient (Picard step)."""
        def mv(x):
            w = _grad_arrays(self.unpack(x), self.grid, self.data.sigma)
            flux = k[None, ...] * w + self.data.A.apply(w)
            return self.pack(_neg_div_arrays(flux, self.grid, self.data.sigma))
        return mv

    def jacobian_matvec(self, x: np.ndarray):
        """Generalized derivative at x of the penalized flux map."""
        w = _grad_arrays(self.unpack(x), self.grid, self.data.sigma)
        mag = _magnitude(w)
        s = mag - self.g
        k = penalty_value(s, self.eps)
        kp = penalty_slope(s, self.eps)
        safe_mag = np.where(mag > 0.0, mag, 1.0)
        coef = kp / safe_mag  # kp = 0 wherever mag could vanish (s < 0 there)

        def mv(v):
            dw = _grad_arrays(self.unpack(v), self.grid, self.data.sigma)
            radial = coef * np.sum(w * dw, axis=0)
            flux = k[None, ...] * dw + radial[None, ...] * w + self.data.A.apply(dw)
            return self.pack(_neg_div_arrays(flux, self.grid, self.data.sigma))
        return mv, k

    def preconditioner(self, k_mean: float):
        """Spectral inverse of the constant-coefficient surrogate."""
        _, mag_sigma = multiplier_table(self.grid, self.data.sigma)
        cbar = self.data.A.a_star + k_mean
        kmin = math.pi / (2.0 * self.grid.extent)
        mult = 1.0 / (cbar * (mag_sigma**2 + kmin ** (2.0 * self.data.sigma)))

        def mv(x):
            full = self.unpack(x)
            out = np.fft.ifftn(mult * np.fft.fftn(full)).real
            return self.pack(out)
        return mv

    def solve_linear(self, matvec, rhs: np.ndarray, precond, rtol: float) -> np.ndarray:
        op = LinearOperator((self.m, self.m), matvec=matvec)
        pre = LinearOperator((self.m, self.m), matvec=precond)
        solver = cg if self.data.A.is_symmetric else bicgstab
        x, info = solver(op, rhs, rtol=rtol, atol=0.0, maxiter=400, M=pre)
        # best-effort iterate on non-convergence; the line search judges it
        return x


def solve_penalized(data: ProblemData, eps: float, init: ScalarField,
                    cfg: PenaltyConfig) -> ScalarField:
    """Solve the penalized quasilinear problem at fixed eps.

    Damped semismooth Newton with Armijo backtracking on the squared
    residual norm; falls back to frozen-coefficient (Picard) steps when
    backtracking stalls.  Converges to sup-norm residual on Omega below
    newton_tol * (1 + sup|f|).
    """
    u, _ = _solve_penalized_impl(data, eps, init, cfg)
    return u


def _solve_penalized_impl(data: ProblemData, eps: float, init: ScalarField,
                          cfg: PenaltyConfig) -> tuple:
    assert_supported(init, data.mask)
    sys = _PenalizedSystem(data, eps)
    x = sys.pack(init.values)
    f_scale = 1.0 + float(np.abs(data.f.values).max())
    tol = cfg.newton_tol * f_scale
    history = []
    r = sys.residual(x)
    for it in range(cfg.newton_max):
        res_sup = float(np.abs(r).max())
        history.append(res_sup)
        if res_sup <= tol:
            return ScalarField(data.grid, sys.unpack(x)), it
        matvec, k = sys.jacobian_matvec(x)
        precond = sys.preconditioner(float(k.mean()))
        d = sys.solve_linear(matvec, -r, precond, rtol=1e-10)
        merit0 = float(r @ r)
        step = cfg.damping
        accepted = False
        for _ in range(30):
            x_try = x + step * d
            r_try = sys.residual(x_try)
            if float(r_try @ r_try) <= (1.0 - 1e-4 * step) * merit0:
                x, r = x_try, r_try
                accepted = True
                break
            step *= 0.5
        if accepted:
            continue
        # Picard fallback: frozen-coefficient solve, small safe steps
        frozen = sys.frozen_matvec(k)
        x_lin = sys.solve_linear(frozen, sys.f_inside, precond, rtol=1e-10)
        step = 0.5
        for _ in range(30):
            x_try = x + step * (x_lin - x)
            r_try = sys.residual(x_try)
            if float(r_try @ r_try) < merit0:
                x, r = x_try, r_try
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise SolverDivergence(
                f"no descent at eps={eps:.4g} (residual {res_sup:.3e})",
                iterate=ScalarField(data.grid, sys.unpack(x)), history=history)
    raise SolverDivergence(
        f"newton_max={cfg.newton_max} exceeded at eps={eps:.4g}",
        iterate=ScalarField(data.grid, sys.unpack(x)), history=history)


def extract_multiplier(u_eps: ScalarField, data: ProblemData, eps: float) -> ScalarField:
    """Discrete multiplier density: the penalty coefficient of the iterate."""
    w = _grad_arrays(u_eps.values, data.grid, data.sigma)
    lam = penalty_value(_magnitude(w) - data.g.g.values, eps)
    return ScalarField(data.grid, lam)


def feasibility_violation(u: ScalarField, data: ProblemData) -> float:
    """Sup over the whole torus of (|D^sigma u| - g)^+."""
    w = _grad_arrays(u.values, data.grid, data.sigma)
    excess = _magnitude(w) - data.g.g.values
    return float(max(excess.max(), 0.0))


def energy(u: ScalarField, data: ProblemData) -> float:
    """Quadratic energy 1/2 <A D^sigma u, D^sigma u> - <f, u>; symmetric A only."""
    if not data.A.is_symmetric:
        raise ValueError("energy requires symmetric coefficients")
    w = _grad_arrays(u.values, data.grid, data.sigma)
    hN = data.grid.cell_volume
    quad = 0.5 * hN * float(np.sum(data.A.apply(w) * w))
    return quad - inner(data.f, u)


def _smooth_bump(mask: DomainMask) -> np.ndarray:
    """C^1-ish profile vanishing outside the mask, used to shape samples."""
    grid = mask.grid
    if mask.is_full:
        return np.ones(grid.shape)
    if mask.box_halfwidth is not None:
        w = mask.box_halfwidth
        bump = np.ones(grid.shape)
        x = grid.axis()
        prof1d = np.where(np.abs(x) < w, np.cos(0.5 * math.pi * x / w) ** 2, 0.0)
        for j in range(grid.dim):
            shape = [1] * grid.dim
            shape[j] = grid.resolution
            bump = bump * prof1d.reshape(shape)
        return bump
    return mask.inside.astype(float)


def sample_feasible(data: ProblemData, rng: np.random.Generator,
                    kmax: int | None = None) -> ScalarField:
    """Random member of the constraint set: band-limited field shaped into
    Omega, then shrunk by nu/(nu+eta) with eta its feasibility excess."""
    grid = data.grid
    z = random_band_limited(grid, rng, kmax=kmax)
    shaped = z.values * _smooth_bump(data.mask)
    if data.mask.is_full:
        shaped = shaped - shaped.mean()
    # aim near the constraint surface so directions are informative
    probe = ScalarField(grid, shaped)
    w = _grad_arrays(probe.values, grid, data.sigma)
    mag_max = float(_magnitude(w).max())
    if mag_max > 0:
        shaped = shaped * (0.8 * float(data.g.g.values.min()) / mag_max)
        probe = ScalarField(grid, shaped)
    eta = feasibility_violation(probe, data)
    factor = data.g.nu / (data.g.nu + eta)
    return ScalarField(grid, factor * shaped)


def shrink_to_feasible(u: ScalarField, data: ProblemData) -> ScalarField:
    """Post-hoc strictly feasible output: u scaled by nu/(nu+eta)."""
    eta = feasibility_violation(u, data)
    if eta == 0.0:
        return u
    factor = data.g.nu / (data.g.nu + eta)
    return ScalarField(u.grid, factor * u.values)


def vi_residual(u: ScalarField, data: ProblemData, trials: int = 64,
                seed: int = 0) -> float:
    """Minimum of <A D^sigma u, D^sigma(v-u)> - <f, v-u> over sampled
    feasible v; nonnegative (within tolerance) iff u solves the problem."""
    rng = np.random.default_rng(seed)
    grid = data.grid
    w = _grad_arrays(u.values, grid, data.sigma)
    Aw = data.A.apply(w)
    hN = grid.cell_volume

    def functional(v_vals: np.ndarray) -> float:
        dv = _grad_arrays(v_vals - u.values, grid, data.sigma)
        return hN * float(np.sum(Aw * dv)) - hN * float(
            np.dot(data.f.values.ravel(), (v_vals - u.values).ravel()))

    candidates = [np.zeros(grid.shape), shrink_to_feasible(u, data).values]
    for _ in range(trials):
        candidates.append(sample_feasible(data, rng).values)
    return min(functional(v) for v in candidates)


def _trace_row(data: ProblemData, u: ScalarField, eps: float,
               iters: int) -> PenaltyTraceRow:
    grid = data.grid
    w = _grad_arrays(u.values, grid, data.sigma)
    mag = _magnitude(w)
    excess = mag - data.g.g.values
    k = penalty_value(excess, eps)
    hN = grid.cell_volume
    sqrt_eps = math.sqrt(eps)
    lam = ScalarField(grid, k)
    comp = abs(hN * float(np.sum(k * excess)))
    res = penalized_residual(u, data, eps)
    en = energy(u, data) if data.A.is_symmetric else None
    return PenaltyTraceRow(
        eps=eps,
        newton_iters=iters,
        residual=float(np.abs(res.values).max()),
        feas_violation=float(max(excess.max(), 0.0)),
        comp_gap=comp,
        norm_dsu_l2=float(np.sqrt(hN * np.sum(mag**2))),
        k_eps_l1=hN * float(np.sum(np.abs(k))),
        k_eps_dsu2_l1=hN * float(np.sum(k * mag**2)),
        energy=en,
        measure_u=hN * float(np.sum(excess <= sqrt_eps)),
        measure_v=hN * float(np.sum((excess > sqrt_eps) & (excess <= 1.0 / eps))),
        measure_w=hN * float(np.sum(excess > 1.0 / eps)),
        excess_integral=hN * float(np.sum(np.maximum(excess, 0.0))),
    )


def solve_vi(data: ProblemData, cfg: PenaltyConfig | None = None,
             init: ScalarField | None = None, diag_trials: int = 32,
             seed: int = 0, shrink: bool = False) -> VISolution:
    """Continuation solve of the constrained problem.

    Runs the penalized solver along the geometric eps schedule with warm
    starts, stopping early once successive iterates differ by less than
    newton_tol in the fractional Sobolev norm; the multiplier is the
    penalty coefficient at the final eps.

    Feasibility is only reached asymptotically along the schedule; with
    shrink=True the returned u is additionally scaled by nu/(nu + eta)
    (eta the residual excess), which makes it strictly feasible while the
    multiplier and trace still describe the unshrunk final iterate.
    """
    cfg = cfg or PenaltyConfig()
    grid = data.grid
    u = init if init is not None else ScalarField(grid, np.zeros(grid.shape))
    trace = []
    eps_final = cfg.eps0
    prev = None
    for eps in cfg.schedule():
        u, iters = _solve_penalized_impl(data, eps, u, cfg)
        eps_final = eps
        trace.append(_trace_row(data, u, eps, iters))
        if prev is not None:
            delta = hsigma_norm(
                ScalarField(grid, u.values - prev.values), data.sigma)
            if delta < cfg.newton_tol:
                break
        prev = u
    lam = extract_multiplier(u, data, eps_final)
    hN = grid.cell_volume
    w = _grad_arrays(u.values, grid, data.sigma)
    excess = _magnitude(w) - data.g.g.values
    comp_gap = abs(hN * float(np.sum(lam.values * excess)))
    viol = float(max(excess.max(), 0.0))
    if shrink:
        u = shrink_to_feasible(u, data)
        viol = feasibility_violation(u, data)
    return VISolution(
        u=u,
        multiplier=lam,
        eps_final=eps_final,
        feas_violation=viol,
        comp_gap=comp_gap,
        vi_res=vi_residual(u, data, trials=diag_trials, seed=seed),
        energy=energy(u, data) if data.A.is_symmetric else None,
        trace=trace,
    )


def multiplier_equation_residual(sol: VISolution, data: ProblemData) -> float:
    """Sup-norm on Omega of -div^sigma[(lambda + A) D^sigma u] - f."""
    grid = data.grid
    w = _grad_arrays(sol.u.values, grid, data.sigma)
    flux = sol.multiplier.values[None, ...] * w + data.A.apply(w)
    r = _neg_div_arrays(flux, grid, data.sigma) - data.f.values
    return float(np.abs(r[data.mask.inside]).max())
