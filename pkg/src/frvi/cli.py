"""Configuration-driven command-line front end.

Subcommands build a problem from a flat INI config, run the requested
solve or study, and write FVF/CSV artifacts plus a machine-readable run
log; the artifact manifest is written last so interrupted runs are
detectable.  Exit codes: 0 success, 1 config error, 2 solver divergence,
3 failed study/acceptance bound.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from .fields import (
    ScalarField,
    make_grid,
    mask_box,
    read_fvf,
    scalar_field,
    write_csv,
    write_fvf,
)
from .oracle import oracle_solve_vi
from .qvi import (
    ConstantGamma,
    FracGradKernelOperator,
    IntegralGamma,
    KernelIntegralOperator,
    OuterFunction,
    QVIProblem,
    SeparatedOperator,
    SuperpositionOperator,
    contraction_certificate,
    estimate_poincare_constant,
    estimate_sobolev_constant,
)
from .studies import (
    holder_study_g,
    lipschitz_study_f,
    mosco_diagnostic,
    penalty_trace_study,
    sigma_limit_study,
)
from .vi import (
    EllipticCoefficients,
    PenaltyConfig,
    ProblemData,
    SolverDivergence,
    Threshold,
    energy,
    identity_coefficients,
    solve_vi,
)
from .fracgrad import hsigma_norm, random_band_limited

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_BOUND = 3

SUBCOMMANDS = ("solve-vi", "solve-qvi", "penalty-sweep", "study-lipschitz",
               "study-holder", "study-sigma-limit", "study-mosco",
               "certificate", "oracle-check")

_ALLOWED_KEYS = {
    "grid": {"dim", "extent", "resolution", "omega_halfwidth"},
    "problem": {"sigma", "coefficients", "a_star", "a_upper", "f", "g", "nu"},
    "penalty": {"eps0", "ratio", "eps_min", "newton_tol", "newton_max", "damping"},
    "qvi": {"variant", "phi", "gamma", "kernel", "outer", "damping",
            "outer_tol", "outer_max"},
    "study-lipschitz": {"deltas"},
    "study-holder": {"t_values", "h"},
    "study-sigma-limit": {"sigmas", "kmax"},
    "study-mosco": {"factors"},
    "run": {"seed", "out", "threads"},
}


class ConfigError(ValueError):
    pass


class RunLog:
    def __init__(self, path: Path):
        self.path = path
        self.records = []

    def event(self, name: str, /, **fields):
        self.records.append({"event": name, **fields})

    def flush(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in _ALLOWED_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        extra = set(parser[section]) - _ALLOWED_KEYS[section]
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    return parser


def _get(cfg, section, key, cast, default=None):
    if not cfg.has_option(section, key):
        if default is not None:
            return default
        raise ConfigError(f"missing [{section}] {key}")
    raw = cfg.get(section, key)
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _field_from_spec(spec: str, grid, mask, base_dir: Path) -> np.ndarray:
    """Presets: constant:<c>, mode:<k>:<amp> (sine along axis 0), file:<path>;
    constant and mode are restricted to the sub-domain."""
    parts = spec.split(":")
    kind = parts[0]
    if kind == "constant":
        return np.where(mask.inside, float(parts[1]), 0.0)
    if kind == "mode":
        k, amp = int(parts[1]), float(parts[2])
        x0 = grid.coordinates()[0]
        vals = amp * np.sin(k * np.pi / grid.extent * x0)
        return np.where(mask.inside, vals, 0.0)
    if kind == "file":
        f = read_fvf(base_dir / parts[1])
        if not isinstance(f, ScalarField) or f.grid != grid:
            raise ConfigError(f"field file {parts[1]} does not match the grid")
        return f.values
    raise ConfigError(f"unknown field spec {spec!r}")


def _threshold_from_spec(spec: str, grid, nu: float, base_dir: Path) -> Threshold:
    parts = spec.split(":")
    if parts[0] == "constant":
        return Threshold(scalar_field(grid, float(parts[1])), nu)
    if parts[0] == "file":
        f = read_fvf(base_dir / parts[1])
        if not isinstance(f, ScalarField) or f.grid != grid:
            raise ConfigError(f"threshold file {parts[1]} does not match the grid")
        return Threshold(f, nu)
    raise ConfigError(f"unknown threshold spec {spec!r}")


def _coefficients_from_spec(cfg, grid, base_dir: Path) -> EllipticCoefficients:
    spec = _get(cfg, "problem", "coefficients", str, "identity")
    parts = spec.split(":")
    if parts[0] == "identity":
        return identity_coefficients(grid)
    if parts[0] == "scale":
        return identity_coefficients(grid, float(parts[1]))
    a_star = _get(cfg, "problem", "a_star", float)
    a_upper = _get(cfg, "problem", "a_upper", float)
    if parts[0] == "file":
        f = read_fvf(base_dir / parts[1])
        return EllipticCoefficients(grid, f.values, a_star=a_star, a_upper=a_upper)
    if parts[0] == "matrix-file":
        raw = np.load(base_dir / parts[1])
        return EllipticCoefficients(grid, raw, a_star=a_star, a_upper=a_upper)
    raise ConfigError(f"unknown coefficients spec {spec!r}")


def _problem_from_config(cfg, base_dir: Path) -> tuple:
    grid = make_grid(_get(cfg, "grid", "dim", int),
                     _get(cfg, "grid", "extent", float),
                     _get(cfg, "grid", "resolution", int))
    mask = mask_box(grid, _get(cfg, "grid", "omega_halfwidth", float))
    sigma = _get(cfg, "problem", "sigma", float)
    A = _coefficients_from_spec(cfg, grid, base_dir)
    f = ScalarField(grid, _field_from_spec(
        _get(cfg, "problem", "f", str), grid, mask, base_dir))
    nu = _get(cfg, "problem", "nu", float)
    if nu <= 0:
        raise ConfigError("threshold lower bound violated")
    thr = _threshold_from_spec(_get(cfg, "problem", "g", str), grid, nu, base_dir)
    data = ProblemData(mask, sigma, A, f, thr)
    pen = PenaltyConfig(
        eps0=_get(cfg, "penalty", "eps0", float, 0.5),
        ratio=_get(cfg, "penalty", "ratio", float, 0.6),
        eps_min=_get(cfg, "penalty", "eps_min", float, 0.04),
        newton_tol=_get(cfg, "penalty", "newton_tol", float, 1e-9),
        newton_max=_get(cfg, "penalty", "newton_max", int, 80),
        damping=_get(cfg, "penalty", "damping", float, 1.0),
    )
    return data, pen


def _gamma_from_spec(spec: str, mask, sigma: float) -> tuple:
    parts = spec.split(":")
    if parts[0] == "constant":
        return ConstantGamma(float(parts[1])), None
    if parts[0] == "integral":
        cp = estimate_poincare_constant(mask.grid, mask, sigma)
        return IntegralGamma(float(parts[1]), float(parts[2]), mask, sigma,
                             cp.value), cp.value
    raise ConfigError(f"unknown gamma spec {spec!r}")


def _operator_from_config(cfg, data: ProblemData):
    variant = _get(cfg, "qvi", "variant", str)
    mask, sigma = data.mask, data.sigma

    def outer():
        parts = _get(cfg, "qvi", "outer", str).split(":")
        return OuterFunction(nu=float(parts[1]), coeff=float(parts[2]), ramp=parts[0])

    if variant == "superposition":
        return SuperpositionOperator(outer())
    if variant in ("kernel", "fracgrad"):
        parts = _get(cfg, "qvi", "kernel", str).split(":")
        if parts[0] != "gaussian":
            raise ConfigError(f"unknown kernel spec {parts[0]!r}")
        width = float(parts[1])
        if mask.grid.dim != 1:
            raise ConfigError("kernel variants are configured for 1D runs")
        x = mask.grid.axis()
        xo = x[mask.inside.ravel()]
        if variant == "kernel":
            kernel = np.exp(-(((x[:, None] - xo[None, :]) / width) ** 2))
            return KernelIntegralOperator(mask, kernel, outer())
        theta = np.exp(-(((xo[:, None] - x[None, :]) / width) ** 2))
        theta = theta.reshape(mask.num_inside, 1, mask.grid.resolution)
        return FracGradKernelOperator(mask, sigma, theta, outer())
    if variant == "separated":
        phi_spec = _get(cfg, "qvi", "phi", str)
        parts = phi_spec.split(":")
        if parts[0] != "constant":
            raise ConfigError(f"unknown phi spec {phi_spec!r}")
        phi = scalar_field(mask.grid, float(parts[1]))
        gamma, _ = _gamma_from_spec(_get(cfg, "qvi", "gamma", str), mask, sigma)
        return SeparatedOperator(phi, gamma)
    raise ConfigError(f"unknown qvi variant {variant!r}")


def _diag_rows(sol) -> list:
    rows = []
    for r in sol.trace:
        rows.append([r.eps, r.newton_iters, r.residual, r.feas_violation,
                     r.comp_gap, r.norm_dsu_l2, r.k_eps_l1, r.k_eps_dsu2_l1,
                     "" if r.energy is None else r.energy])
    return rows


DIAG_COLUMNS = ["eps", "newton_iters", "residual", "feas_violation", "comp_gap",
                "norm_Dsu_L2", "k_eps_L1", "k_eps_Dsu2_L1", "energy"]


def _write_study(report, out: Path, log: RunLog, artifacts: list) -> int:
    csv_path = out / f"{report.kind}.csv"
    report.to_csv(csv_path)
    artifacts.append(csv_path.name)
    summary_path = out / f"{report.kind}_summary.txt"
    summary_path.write_text(report.summary() + "\n", encoding="utf-8")
    artifacts.append(summary_path.name)
    print(report.summary())
    for c in report.checks:
        log.event("bound_check", name=c.name, observed=c.observed,
                  bound=c.bound, passed=c.passed, provenance=c.provenance)
    return EXIT_OK if report.passed else EXIT_BOUND


def run(config_path: str, subcommand: str, out_dir: str | None = None,
        seed: int | None = None, threads: int = 0) -> int:
    """Execute one subcommand against a config; returns the exit status."""
    if subcommand not in SUBCOMMANDS:
        print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_CONFIG
    base_dir = Path(config_path).resolve().parent
    try:
        cfg = _load_config(config_path)
        out = Path(out_dir or _get(cfg, "run", "out", str, "out"))
        if not out.is_absolute():
            out = base_dir / out
        seed = seed if seed is not None else _get(cfg, "run", "seed", int, 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "run.log")
    log.event("start", subcommand=subcommand, config=str(config_path),
              seed=seed, threads=threads)
    artifacts = []
    try:
        status = _dispatch(subcommand, cfg, base_dir, out, seed, log, artifacts)
    except ConfigError as exc:
        log.event("error", kind="config", reason=str(exc))
        log.flush()
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverDivergence as exc:
        log.event("error", kind="divergence", reason=str(exc),
                  history=[float(h) for h in exc.history])
        log.flush()
        print(f"solver divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    log.event("done", status=status)
    log.flush()
    artifacts.append("run.log")
    write_csv(out / "manifest.csv", ["artifact"], [[a] for a in artifacts])
    return status


def _dispatch(subcommand, cfg, base_dir, out, seed, log, artifacts) -> int:
    if subcommand == "solve-vi":
        data, pen = _problem_from_config(cfg, base_dir)
        sol = solve_vi(data, pen, seed=seed)
        write_fvf(out / "u.fvf", sol.u)
        write_fvf(out / "lambda.fvf", sol.multiplier)
        write_csv(out / "diagnostics.csv", DIAG_COLUMNS, _diag_rows(sol))
        artifacts.extend(["u.fvf", "lambda.fvf", "diagnostics.csv"])
        log.event("solved", eps_final=sol.eps_final,
                  feas_violation=sol.feas_violation, comp_gap=sol.comp_gap)
        print(f"solve-vi: eps_final={sol.eps_final:.4g} "
              f"feas_violation={sol.feas_violation:.4g} comp_gap={sol.comp_gap:.4g}")
        return EXIT_OK

    if subcommand == "solve-qvi":
        data, pen = _problem_from_config(cfg, base_dir)
        operator = _operator_from_config(cfg, data)
        problem = QVIProblem(data.mask, data.sigma, data.A, data.f)
        from .qvi import solve_qvi
        sol = solve_qvi(
            problem, operator, pen,
            damping=_get(cfg, "qvi", "damping", float, 1.0),
            outer_tol=_get(cfg, "qvi", "outer_tol", float, 1e-6),
            outer_max=_get(cfg, "qvi", "outer_max", int, 40))
        write_fvf(out / "u.fvf", sol.u)
        write_fvf(out / "g_fixed.fvf", sol.g_fixed.g)
        rows = [[r.outer_iter, r.fp_residual, r.damping, r.inner_eps_final,
                 r.feas_violation, r.comp_gap] for r in sol.trace]
        write_csv(out / "qvi_trace.csv",
                  ["outer_iter", "fp_residual", "damping", "inner_eps_final",
                   "feas_violation", "comp_gap"], rows)
        artifacts.extend(["u.fvf", "g_fixed.fvf", "qvi_trace.csv"])
        if isinstance(operator, SeparatedOperator):
            c_star = estimate_sobolev_constant(data.grid, data.mask, data.sigma)
            report = contraction_certificate(
                data.f, data.mask, data.sigma, operator, c_star.value,
                data.A.a_star)
            write_csv(out / "certificate.csv",
                      ["C_sharp", "R_f", "eta", "gamma", "q", "certified"],
                      [[report.C_sharp, report.R_f, report.eta_Rf,
                        report.gamma_Rf, report.q, report.certified]])
            artifacts.append("certificate.csv")
        log.event("solved", outer_iters=sol.iterations, converged=sol.converged,
                  fp_residual=sol.fixed_point_residual)
        print(f"solve-qvi: iters={sol.iterations} converged={sol.converged} "
              f"fp_residual={sol.fixed_point_residual:.4g}")
        if not sol.converged:
            return EXIT_DIVERGED
        return EXIT_OK

    if subcommand == "penalty-sweep":
        data, pen = _problem_from_config(cfg, base_dir)
        return _write_study(penalty_trace_study(data, pen), out, log, artifacts)

    if subcommand == "study-lipschitz":
        data, pen = _problem_from_config(cfg, base_dir)
        factors = [float(t) for t in _get(cfg, "study-lipschitz", "deltas", str).split(",")]
        deltas = [ScalarField(data.grid, t * data.f.values) for t in factors]
        return _write_study(lipschitz_study_f(data, deltas, pen), out, log, artifacts)

    if subcommand == "study-holder":
        data, pen = _problem_from_config(cfg, base_dir)
        ts = [float(t) for t in _get(cfg, "study-holder", "t_values", str).split(",")]
        h = ScalarField(data.grid, _field_from_spec(
            _get(cfg, "study-holder", "h", str), data.grid, data.mask, base_dir))
        h = ScalarField(data.grid, np.abs(h.values))
        return _write_study(holder_study_g(data, ts, h, pen), out, log, artifacts)

    if subcommand == "study-sigma-limit":
        data, _ = _problem_from_config(cfg, base_dir)
        sigmas = [float(s) for s in _get(cfg, "study-sigma-limit", "sigmas", str).split(",")]
        kmax = _get(cfg, "study-sigma-limit", "kmax", int, 2)
        rng = np.random.default_rng(seed)
        u = random_band_limited(data.grid, rng, kmax=kmax)
        u = ScalarField(data.grid, np.where(data.mask.inside, u.values, 0.0))
        return _write_study(sigma_limit_study(u, sigmas), out, log, artifacts)

    if subcommand == "study-mosco":
        data, pen = _problem_from_config(cfg, base_dir)
        ns = [int(n) for n in _get(cfg, "study-mosco", "factors", str).split(",")]
        gs = [Threshold(ScalarField(data.grid, data.g.g.values * (1.0 + 1.0 / n)),
                        data.g.nu) for n in ns]
        return _write_study(mosco_diagnostic(data, gs, pen), out, log, artifacts)

    if subcommand == "certificate":
        data, _ = _problem_from_config(cfg, base_dir)
        operator = _operator_from_config(cfg, data)
        if not isinstance(operator, SeparatedOperator):
            raise ConfigError("certificate requires the separated variant")
        c_star = estimate_sobolev_constant(data.grid, data.mask, data.sigma)
        report = contraction_certificate(data.f, data.mask, data.sigma,
                                         operator, c_star.value, data.A.a_star)
        write_csv(out / "certificate.csv",
                  ["C_sharp", "R_f", "eta", "gamma", "q", "certified"],
                  [[report.C_sharp, report.R_f, report.eta_Rf, report.gamma_Rf,
                    report.q, report.certified]])
        artifacts.append("certificate.csv")
        log.event("certificate", q=report.q, certified=report.certified)
        print(f"certificate: q={report.q:.4g} certified={report.certified}")
        return EXIT_OK

    if subcommand == "oracle-check":
        data, pen = _problem_from_config(cfg, base_dir)
        sol = solve_vi(data, pen, seed=seed)
        u_ref = oracle_solve_vi(data)
        ref_norm = hsigma_norm(u_ref, data.sigma)
        gap = hsigma_norm(ScalarField(data.grid, sol.u.values - u_ref.values),
                          data.sigma)
        rel = gap / ref_norm if ref_norm > 0 else gap
        e_rel = abs(energy(sol.u, data) - energy(u_ref, data)) / max(
            abs(energy(u_ref, data)), 1e-300)
        write_csv(out / "oracle_check.csv",
                  ["rel_hsigma_gap", "rel_energy_gap"], [[rel, e_rel]])
        artifacts.append("oracle_check.csv")
        log.event("oracle_check", rel_hsigma_gap=rel, rel_energy_gap=e_rel)
        print(f"oracle-check: rel_hsigma_gap={rel:.4g} rel_energy_gap={e_rel:.4g}")
        return EXIT_OK if (rel <= 1e-3 and e_rel <= 1e-4) else EXIT_BOUND

    raise ConfigError(f"unhandled subcommand {subcommand!r}")


def main(argv: list | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="frvi",
        description="Solvers for fractional-gradient-constrained problems")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=0,
                        help="0 = auto (runs are single-process either way)")
    args = parser.parse_args(argv)
    return run(args.config, args.subcommand, out_dir=args.out,
               seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
