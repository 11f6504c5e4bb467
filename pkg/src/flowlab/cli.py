"""Experiment runner: binds config files to the experiment pipelines.

Six subcommands cover the experiment families: ``velocity-check``,
``grid-instability``, ``recon-correlation``, ``bound-verify``,
``sparsity-scan`` and ``chi2-tail``.  Settings come from built-in
defaults, overridden by an optional TOML config file, overridden by
command-line flags.  Every run writes a JSON document carrying a full
config echo (so outputs are self-describing) plus experiment-specific
CSV data, and prints a one-line summary.  Re-running an identical config
byte-reproduces every output except the ``meta`` block, which holds the
timestamp and wall-clock numbers; ``--threads`` changes wall-clock only.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bounds import (
    SparsityScanConfig,
    chi_square_tail,
    norm_sq_threshold,
    sparsity_scan,
    verify_lower_bound,
)
from .instability import GridSpec, grid_intrinsic_map
from .mixture import GaussianMixture, NeighborMixture
from .ode import IntegrationError, SolverConfig
from .recon import correlation_experiment
from .samplers import pushforward_sampler, uniform_cube_sampler

EXPERIMENTS = (
    "velocity-check",
    "grid-instability",
    "recon-correlation",
    "bound-verify",
    "sparsity-scan",
    "chi2-tail",
)

# sparse three-mode target used by the 2-D experiments when no
# distribution is configured: two modes split along y plus one off to
# the side, narrow enough that the region between them is a density gap
DEFAULT_MIXTURE = {
    "kind": "gaussian-mixture",
    "components": [
        {"weight": 1.0 / 3.0, "mean": [-0.5, -0.6], "cov": 0.01},
        {"weight": 1.0 / 3.0, "mean": [-0.5, 0.6], "cov": 0.01},
        {"weight": 1.0 / 3.0, "mean": [0.7, 0.0], "cov": 0.01},
    ],
}

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "results",
    "distribution": DEFAULT_MIXTURE,
    "solver": {"method": "rk45"},
    "velocity": {"points": 50},
    "grid": {"x_range": [-1.0, 1.0], "y_range": [-1.0, 1.0], "counts": [201, 201], "axis": "y"},
    "correlation": {"count": 500, "k_directions": 8, "low": -1.0, "high": 1.0},
    "bound": {"m_threshold": 2.0, "samples": 1000, "route": "density",
              "sampler": "uniform", "low": 0.0, "high": 1.0},
    "scan": {"dims": [2, 4, 8, 16], "m": 4, "dbar_min": 0.5, "half_width": 0.2,
             "alpha": 0.5, "m_threshold": 1.5, "samples": 2000},
    "chi2": {"n": 2},
}


class ConfigError(ValueError):
    """Invalid or missing configuration for the chosen experiment."""


# -- config assembly ---------------------------------------------------------


def _merge(base, override):
    if not isinstance(base, dict) or not isinstance(override, dict):
        return override
    out = dict(base)
    for key, value in override.items():
        out[key] = _merge(base.get(key), value) if key in base else value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc


def build_mixture(table: dict):
    kind = table.get("kind")
    components = table.get("components")
    if kind not in ("gaussian-mixture", "neighbor-mixture"):
        raise ConfigError(f"unknown distribution kind {kind!r}")
    if not components:
        raise ConfigError("distribution needs a non-empty components list")

    weights = [c.get("weight") for c in components]
    if any(w is None for w in weights):
        raise ConfigError("every component needs a weight")

    if kind == "neighbor-mixture":
        try:
            return NeighborMixture(
                weights,
                [c["center"] for c in components],
                [c["half_width"] for c in components],
                [c["kernel_width"] for c in components],
            )
        except KeyError as exc:
            raise ConfigError(f"neighbor component missing field {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    means = []
    covs = []
    for c in components:
        if "mean" not in c or "cov" not in c:
            raise ConfigError("gaussian component needs 'mean' and 'cov'")
        mean = np.asarray(c["mean"], dtype=float)
        n = mean.shape[0]
        cov = c["cov"]
        if np.isscalar(cov):
            cov_mat = float(cov) * np.eye(n)
        else:
            cov_arr = np.asarray(cov, dtype=float)
            cov_mat = np.diag(cov_arr) if cov_arr.ndim == 1 else cov_arr
        means.append(mean)
        covs.append(cov_mat)
    try:
        return GaussianMixture(weights, means, np.asarray(covs))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_solver(table: dict, part: str | None = None) -> SolverConfig:
    merged = {k: v for k, v in table.items() if not isinstance(v, dict)}
    if part is not None and isinstance(table.get(part), dict):
        merged.update(table[part])
    allowed = {"method", "steps", "abs_tol", "rel_tol", "max_steps"}
    unknown = set(merged) - allowed
    if unknown:
        raise ConfigError(f"unknown solver fields: {sorted(unknown)}")
    try:
        return SolverConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad solver table: {exc}") from exc


# -- output helpers ----------------------------------------------------------


def _pyify(value):
    if isinstance(value, dict):
        return {k: _pyify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_pyify(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_pyify(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def write_json(path: Path, experiment: str, config: dict, results: dict, runtime: float, meta_extra: dict | None = None) -> None:
    # execution details (timing, worker count, paths) live only here, so
    # identical configs byte-reproduce everything outside "meta"
    meta = {"timestamp": datetime.now(timezone.utc).isoformat(), "runtime_s": runtime}
    meta["threads"] = config.get("threads")
    meta["out"] = str(config.get("out"))
    if meta_extra:
        meta.update(meta_extra)
    echo = {k: v for k, v in config.items() if k not in ("threads", "out")}
    doc = {
        "experiment": experiment,
        "config": _pyify(echo),
        "results": _pyify(results),
        "meta": _pyify(meta),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    # repr of a float is the shortest round-trip representation
    return repr(float(value))


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- experiment runners ------------------------------------------------------


def _run_velocity_check(cfg: dict, out: Path, threads: int) -> str:
    gm = build_mixture(cfg["distribution"])
    if not isinstance(gm, GaussianMixture):
        raise ConfigError("velocity-check requires a gaussian-mixture distribution")
    points = int(cfg["velocity"]["points"])
    rng = np.random.default_rng(cfg["seed"])
    start = time.perf_counter()

    jac_err = 0.0
    cont_err = 0.0
    quad_err = 0.0
    fd = np.finfo(float).eps ** (1.0 / 3.0)
    for _ in range(points):
        x = rng.uniform(-1.0, 1.0, size=gm.dim)
        t = rng.uniform(0.1, 0.9)

        jac = gm.velocity_jacobian(x, t)
        fd_jac = np.empty_like(jac)
        h = fd * max(1.0, float(np.max(np.abs(x))))
        for d in range(gm.dim):
            e = np.zeros(gm.dim)
            e[d] = h
            fd_jac[:, d] = (gm.velocity(x + e, t) - gm.velocity(x - e, t)) / (2.0 * h)
        jac_err = max(jac_err, float(np.linalg.norm(jac - fd_jac) / max(np.linalg.norm(fd_jac), 1e-30)))

        # continuity residual: d/dt p_t + div(p_t v) = 0, all closed forms
        # except the two central differences
        ht = fd
        p_plus = gm.marginal_at_time(t + ht).density(x)
        p_minus = gm.marginal_at_time(t - ht).density(x)
        dp_dt = (p_plus - p_minus) / (2.0 * ht)
        marg = gm.marginal_at_time(t)
        div_pv = 0.0
        for d in range(gm.dim):
            e = np.zeros(gm.dim)
            e[d] = h
            gp = marg.density(x + e) * gm.velocity(x + e, t)[d]
            gmn = marg.density(x - e) * gm.velocity(x - e, t)[d]
            div_pv += (gp - gmn) / (2.0 * h)
        cont_err = max(cont_err, abs(dp_dt + div_pv) / marg.density(x))

        if gm.dim <= 2:
            quad_err = max(quad_err, float(np.max(np.abs(gm.velocity(x, t) - _velocity_quadrature(gm, x, t)))))

    runtime = time.perf_counter() - start
    results = {
        "points": points,
        "max_jacobian_rel_err": jac_err,
        "max_continuity_rel_err": cont_err,
        "max_velocity_quadrature_err": quad_err if gm.dim <= 2 else None,
        "jacobian_ok": jac_err <= 1e-5,
        "continuity_ok": cont_err <= 1e-4,
    }
    write_json(out / "velocity_check.json", "velocity-check", cfg, results, runtime)
    return (
        f"velocity-check: {points} points, jac_err={jac_err:.3e}, "
        f"continuity_err={cont_err:.3e} ({runtime:.1f}s) -> {out / 'velocity_check.json'}"
    )


def _velocity_quadrature(gm: GaussianMixture, x: np.ndarray, t: float, nodes: int = 401) -> np.ndarray:
    """Quadrature of the conditional expectation defining the velocity.

    Integrates over the data variable on component-local grids (10
    standard deviations per axis around each mean), which keeps the
    integrand resolved for arbitrarily narrow components.
    """
    from scipy.integrate import simpson

    num_total = np.zeros(gm.dim)
    den_total = 0.0
    for k in range(gm.n_components):
        mean = gm.means[k]
        sig = np.sqrt(np.diag(gm.covariances[k]))
        grids = [np.linspace(mean[d] - 10 * sig[d], mean[d] + 10 * sig[d], nodes) for d in range(gm.dim)]
        mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, gm.dim)
        z = (x - (1.0 - t) * mesh) / t
        comp = GaussianMixture([1.0], mean[None, :], gm.covariances[k][None])
        weight = np.exp(comp.log_density(mesh) - 0.5 * np.sum(z * z, axis=1))
        shape = [nodes] * gm.dim
        den = weight.reshape(shape)
        num = ((z - mesh) * weight[:, None]).reshape(shape + [gm.dim])
        for axis in range(gm.dim):
            den = simpson(den, x=grids[axis], axis=0)
            num = simpson(num, x=grids[axis], axis=0)
        num_total += gm.weights[k] * num
        den_total += gm.weights[k] * den
    return num_total / den_total


def _run_grid(cfg: dict, out: Path, threads: int) -> str:
    gm = build_mixture(cfg["distribution"])
    g = cfg["grid"]
    grid = GridSpec(tuple(g["x_range"]), tuple(g["y_range"]), tuple(g["counts"]))
    axis = g["axis"]
    solver = build_solver(cfg["solver"])
    start = time.perf_counter()
    result = grid_intrinsic_map(gm, grid, solver, axis=axis, threads=threads)
    runtime = time.perf_counter() - start

    coef = result.coefficients
    if axis == "y":
        row_coords = 0.5 * (result.ys[1:] + result.ys[:-1])
        col_coords = result.xs
    else:
        row_coords = result.ys
        col_coords = 0.5 * (result.xs[1:] + result.xs[:-1])
    header = ["y/x"] + [_fmt(c) for c in col_coords]
    rows = [[_fmt(row_coords[j])] + [_fmt(v) for v in coef[j]] for j in range(coef.shape[0])]
    write_csv(out / "grid.csv", header, rows)

    frac = float(np.mean(coef > 1.0))
    results = {
        "shape": list(coef.shape),
        "axis": axis,
        "fraction_above_one": frac,
        "max_coefficient": float(coef.max()),
        "min_coefficient": float(coef.min()),
    }
    write_json(out / "grid.json", "grid-instability", cfg, results, runtime)
    return (
        f"grid-instability: {coef.shape[0]}x{coef.shape[1]} coefficients, "
        f"{100 * frac:.1f}% above 1, max={coef.max():.3f} ({runtime:.1f}s) -> {out / 'grid.csv'}"
    )


def _run_correlation(cfg: dict, out: Path, threads: int) -> str:
    gm = build_mixture(cfg["distribution"])
    if not isinstance(gm, GaussianMixture):
        raise ConfigError("recon-correlation requires a gaussian-mixture distribution")
    c = cfg["correlation"]
    sampler = uniform_cube_sampler(c["low"], c["high"], gm.dim)
    cfg_inv = build_solver(cfg["solver"], "inversion")
    cfg_gen = build_solver(cfg["solver"], "generation")
    start = time.perf_counter()
    result = correlation_experiment(
        gm, sampler, int(c["count"]), cfg_inv, cfg_gen,
        k_directions=int(c["k_directions"]), magnitude=c.get("magnitude"),
        seed=int(cfg["seed"]), threads=threads,
    )
    runtime = time.perf_counter() - start

    k = int(c["k_directions"])
    header = [f"x{d}" for d in range(gm.dim)] + ["recon_error", "mean_coefficient"] + [
        f"coefficient_{j}" for j in range(k)
    ]
    rows = [
        list(r.initial_point) + [r.reconstruction_error, r.mean_realized_coefficient] + list(r.coefficients)
        for r in result.records
    ]
    write_csv(out / "records.csv", header, rows)
    results = {
        "count": len(result.records),
        "pearson": result.pearson,
        "spearman": result.spearman,
        "degenerate": result.degenerate,
    }
    write_json(out / "summary.json", "recon-correlation", cfg, results, runtime)
    corr = "degenerate" if result.degenerate else f"spearman={result.spearman:.3f}, pearson={result.pearson:.3f}"
    return f"recon-correlation: {len(result.records)} records, {corr} ({runtime:.1f}s) -> {out / 'records.csv'}"


def _run_bound(cfg: dict, out: Path, threads: int) -> str:
    gm = build_mixture(cfg["distribution"])
    b = cfg["bound"]
    solver = build_solver(cfg["solver"])
    if isinstance(gm, NeighborMixture):
        flow_gm = gm.gaussian_surrogate()
        density_source = gm
    else:
        flow_gm = gm
        density_source = gm
    if b["sampler"] == "uniform":
        sampler = uniform_cube_sampler(b["low"], b["high"], flow_gm.dim)
    elif b["sampler"] == "from-generation":
        sampler = pushforward_sampler(flow_gm, solver)
    else:
        raise ConfigError(f"unknown sampler kind {b['sampler']!r}")

    start = time.perf_counter()
    report = verify_lower_bound(
        sampler, flow_gm, solver, flow_gm.dim, float(b["m_threshold"]),
        int(b["samples"]), int(cfg["seed"]), route=b["route"], threads=threads,
    )
    runtime = time.perf_counter() - start
    results = {
        "n": report.n,
        "m_threshold": report.m_threshold,
        "samples": report.sample_count,
        "norm_sq_threshold": norm_sq_threshold(report.n),
        "eps_hat": report.eps_hat,
        "eps_ci": report.eps_ci,
        "delta_hat": report.delta_hat,
        "delta_ci": report.delta_ci,
        "p_hat": report.p_hat,
        "p_ci": report.p_ci,
        "margin": report.margin,
        "bound_ok": report.inequality_satisfied,
        "density_source": "neighbor-mixture-surrogate" if isinstance(gm, NeighborMixture) else "gaussian-mixture",
    }
    write_json(out / "bound.json", "bound-verify", cfg, results, runtime)
    return (
        f"bound-verify: p_hat={report.p_hat:.4f} >= 1 - {report.eps_hat:.4f} - {report.delta_hat:.4f} "
        f"- {report.margin:.4f} is {str(report.inequality_satisfied).lower()} ({runtime:.1f}s) -> {out / 'bound.json'}"
    )


def _run_scan(cfg: dict, out: Path, threads: int) -> str:
    s = cfg["scan"]
    try:
        scan_cfg = SparsityScanConfig(
            dims=tuple(int(n) for n in s["dims"]),
            m=int(s["m"]),
            dbar_min=float(s["dbar_min"]),
            half_width=float(s["half_width"]),
            alpha=float(s["alpha"]),
            m_threshold=float(s["m_threshold"]),
            samples=int(s["samples"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    solver = build_solver(cfg["solver"])

    start = time.perf_counter()
    level_times = {}
    rows = sparsity_scan(scan_cfg, solver, threads, on_level=lambda n, s: level_times.__setitem__(str(n), s))
    runtime = time.perf_counter() - start

    header = ["n", "w", "eps_hat", "eps_ci", "delta_hat", "delta_ci", "p_hat", "p_ci", "M0", "bound_ok"]
    csv_rows = [
        [r.n, r.kernel_width, r.eps_hat, r.eps_ci, r.delta_hat, r.delta_ci, r.p_hat, r.p_ci, r.m0, r.bound_ok]
        for r in rows
    ]
    write_csv(out / "scan.csv", header, csv_rows)
    results = {
        "levels": [
            {"n": r.n, "w": r.kernel_width, "eps_hat": r.eps_hat, "eps_ci": r.eps_ci,
             "delta_hat": r.delta_hat, "delta_ci": r.delta_ci, "p_hat": r.p_hat,
             "p_ci": r.p_ci, "M0": r.m0, "bound_ok": r.bound_ok}
            for r in rows
        ],
    }
    write_json(out / "scan.json", "sparsity-scan", cfg, results, runtime,
               meta_extra={"level_runtime_s": level_times})
    trend = " ".join(f"n={r.n}:p={r.p_hat:.3f}" for r in rows)
    return f"sparsity-scan: {trend} ({runtime:.1f}s) -> {out / 'scan.csv'}"


def _run_chi2(cfg: dict, out: Path, threads: int) -> str:
    n = int(cfg["chi2"]["n"])
    start = time.perf_counter()
    tail = chi_square_tail(n)
    runtime = time.perf_counter() - start
    results = {"n": n, "threshold": norm_sq_threshold(n), "tail": tail}
    write_json(out / "chi2_tail.json", "chi2-tail", cfg, results, runtime)
    return f"chi2-tail: n={n} tail={tail:.6e} -> {out / 'chi2_tail.json'}"


_RUNNERS = {
    "velocity-check": _run_velocity_check,
    "grid-instability": _run_grid,
    "recon-correlation": _run_correlation,
    "bound-verify": _run_bound,
    "sparsity-scan": _run_scan,
    "chi2-tail": _run_chi2,
}

# flat per-experiment flag -> config path
_FLAG_MAP = {
    "m_threshold": (("bound", "m_threshold"), ("scan", "m_threshold")),
    "samples": (("bound", "samples"), ("scan", "samples")),
    "count": (("correlation", "count"),),
    "k_directions": (("correlation", "k_directions"),),
    "n": (("chi2", "n"),),
    "points": (("velocity", "points"),),
}


def run(experiment: str, config: dict) -> str:
    """Dispatch one experiment; returns the printed summary line."""
    if experiment not in _RUNNERS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    out = Path(config["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return _RUNNERS[experiment](config, out, int(config["threads"]))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--threads", type=int, default=None, help="worker pool size")
        p.add_argument("--out", default=None, help="output directory")
        if name == "chi2-tail":
            p.add_argument("--n", type=int, default=None, help="dimension")
        if name == "velocity-check":
            p.add_argument("--points", type=int, default=None)
        if name == "recon-correlation":
            p.add_argument("--count", type=int, default=None)
            p.add_argument("--k-directions", dest="k_directions", type=int, default=None)
        if name in ("bound-verify", "sparsity-scan"):
            p.add_argument("--m-threshold", dest="m_threshold", type=float, default=None)
            p.add_argument("--samples", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        config = _merge(DEFAULTS, load_config(args.config))
        for flag in ("seed", "threads", "out"):
            value = getattr(args, flag, None)
            if value is not None:
                config[flag] = value
        for flag, paths in _FLAG_MAP.items():
            value = getattr(args, flag, None)
            if value is not None:
                for section, key in paths:
                    config[section][key] = value
        summary = run(args.experiment, config)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except IntegrationError as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
