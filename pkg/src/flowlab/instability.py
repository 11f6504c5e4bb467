"""Instability metrics of the generation mapping.

The central quantities are directional gains of the flow-map Jacobian:
the intrinsic coefficient ``|J u| / |u|`` for an infinitesimal direction
u, the realized coefficient ``|F(x+n) - F(x)| / |n|`` for a finite
perturbation n, and the geometric average of all singular values,
``|det J|^(1/n)``, which doubles as a cheap density-ratio diagnostic.
Values above one mark directions along which the generation mapping
amplifies perturbations of the starting noise.

Also here: the shrinking-perturbation search certifying that a large
intrinsic coefficient is realized by finite perturbations, the uniform
grid map of adjacent-difference gains used for the two-dimensional
pictures, and worst-case Lipschitz / curvature estimates along a
trajectory that feed the Euler-inversion error bound.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mixture import GaussianMixture
from .ode import SolverConfig, generate, integrate_with_jacobian, invert

__all__ = [
    "DirectionalCoefficient",
    "InstabilityReport",
    "PerturbationSearch",
    "GridSpec",
    "GridInstabilityMap",
    "intrinsic_coefficient",
    "realized_coefficient",
    "geometric_average_via_jacobian",
    "geometric_average_via_density",
    "top_singular_direction",
    "verify_instability_effect",
    "grid_intrinsic_map",
    "gronwall_estimates",
    "recon_error_bound_term",
    "point_report",
]

PERTURBATION_MAGNITUDES = tuple(10.0 ** -k for k in range(1, 9))


@dataclass(frozen=True)
class DirectionalCoefficient:
    """Directional Jacobian gain |J u| / |u| at a point."""

    point: np.ndarray
    direction: np.ndarray
    value: float


@dataclass(frozen=True)
class InstabilityReport:
    """Per-point record of intrinsic and realized gains around one input."""

    point: np.ndarray
    inverted_noise: np.ndarray
    intrinsic_coeffs: list[DirectionalCoefficient]
    realized_coeffs: list[tuple[np.ndarray, float]]
    geometric_average: float
    reconstruction_error: float


@dataclass(frozen=True)
class PerturbationSearch:
    """Outcome of the shrinking-perturbation search at one point."""

    perturbation: np.ndarray | None
    realized: float | None
    success: bool
    intrinsic: float


def intrinsic_coefficient(jac: np.ndarray, u: np.ndarray) -> float:
    """|J u| / |u| for a nonzero direction u."""
    u = np.asarray(u, dtype=float)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise ValueError("direction must be nonzero")
    return float(np.linalg.norm(np.asarray(jac) @ u) / nu)


def realized_coefficient(flow, x, perturbation) -> float:
    """|flow(x + n) - flow(x)| / |n| for a nonzero perturbation n."""
    p = np.asarray(perturbation, dtype=float)
    norm = np.linalg.norm(p)
    if norm == 0.0:
        raise ValueError("perturbation must be nonzero")
    x = np.asarray(x, dtype=float)
    return float(np.linalg.norm(np.asarray(flow(x + p)) - np.asarray(flow(x))) / norm)


def geometric_average_via_jacobian(jac: np.ndarray) -> float:
    """Geometric mean of the singular values, exp(mean(log sigma)) = |det J|^(1/n)."""
    sigma = np.linalg.svd(np.asarray(jac, dtype=float), compute_uv=False)
    if sigma[-1] < 1e-300:
        raise ValueError("Jacobian is numerically singular; flow map is degenerate")
    return float(np.exp(np.mean(np.log(sigma))))


def geometric_average_via_density(gm: GaussianMixture, z, cfg: SolverConfig) -> float:
    """Geometric-average gain from the push-forward density ratio.

    Equals ``(gamma(z) / p_gen(G(z)))^(1/n)`` with gamma the standard
    Gaussian density: the flow transports density, so the volume growth
    of the generation map at z is the ratio of start to landing density.
    Cheap route for larger dimensions since no Jacobian is propagated.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    x = generate(gm, z, cfg)
    gauss = GaussianMixture.standard_normal(gm.dim)
    log_ratio = (np.asarray(gauss.log_density(z)) - np.asarray(gm.log_density(x))) / gm.dim
    out = np.exp(log_ratio)
    return float(out) if single else out


def top_singular_direction(jac: np.ndarray) -> tuple[np.ndarray, float]:
    """Right singular vector and value attaining max |J u| / |u|.

    Sign fixed so the largest-magnitude entry is positive.
    """
    _, sigma, vt = np.linalg.svd(np.asarray(jac, dtype=float))
    direction = vt[0]
    lead = np.argmax(np.abs(direction))
    if direction[lead] < 0.0:
        direction = -direction
    return direction, float(sigma[0])


def verify_instability_effect(
    gm: GaussianMixture,
    z,
    delta: float,
    cfg: SolverConfig,
    magnitudes: tuple[float, ...] = PERTURBATION_MAGNITUDES,
) -> PerturbationSearch:
    """Search for a finite perturbation realizing the top intrinsic gain.

    Computes the generation-map Jacobian at z, takes the top right
    singular direction h, and evaluates the realized coefficient at
    perturbations ``m * h`` over the shrinking magnitude ladder.  Returns
    the first success ``A >= E / (1 + delta)``, or a failure record after
    the ladder is exhausted (failure is an outcome, not an error).
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    z = np.asarray(z, dtype=float)
    _, jac = integrate_with_jacobian(gm, z, 1.0, 0.0, cfg)
    direction, top = top_singular_direction(jac)
    target = top / (1.0 + delta)

    base = generate(gm, z, cfg)
    for mag in magnitudes:
        moved = generate(gm, z + mag * direction, cfg)
        realized = float(np.linalg.norm(moved - base) / mag)
        if realized >= target:
            return PerturbationSearch(mag * direction, realized, True, top)
    return PerturbationSearch(None, None, False, top)


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid of starting points for the 2-D map."""

    x_range: tuple[float, float] = (-1.0, 1.0)
    y_range: tuple[float, float] = (-1.0, 1.0)
    counts: tuple[int, int] = (201, 201)

    def __post_init__(self):
        if self.counts[0] < 2 or self.counts[1] < 2:
            raise ValueError("grid needs at least 2 nodes per axis")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.counts[0])

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.counts[1])


@dataclass(frozen=True)
class GridInstabilityMap:
    """Adjacent-difference gain map; coefficients indexed [y, x]."""

    xs: np.ndarray
    ys: np.ndarray
    axis: str
    coefficients: np.ndarray


def grid_intrinsic_map(
    gm: GaussianMixture,
    grid: GridSpec,
    cfg: SolverConfig,
    axis: str = "y",
    threads: int = 1,
) -> GridInstabilityMap:
    """Directional gain of the generation map from adjacent grid differences.

    Every node is integrated from t=1 to t=0; the coefficient between
    neighbors along the chosen axis is the ratio of the generated
    displacement to the grid spacing (forward differences, so the output
    loses one row along y or one column along x).  Rows of the grid are
    integrated as fixed batches, independent of the thread count.
    """
    if gm.dim != 2:
        raise ValueError("grid map requires a 2-D mixture")
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    xs, ys = grid.xs, grid.ys
    nx, ny = len(xs), len(ys)

    def run_row(j: int) -> np.ndarray:
        nodes = np.column_stack([xs, np.full(nx, ys[j])])
        return generate(gm, nodes, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_row, range(ny)))
    else:
        rows = [run_row(j) for j in range(ny)]
    gen = np.asarray(rows)  # (ny, nx, 2)

    if axis == "y":
        diffs = np.linalg.norm(gen[1:] - gen[:-1], axis=2)
        spacing = (ys[1:] - ys[:-1])[:, None]
    else:
        diffs = np.linalg.norm(gen[:, 1:] - gen[:, :-1], axis=2)
        spacing = (xs[1:] - xs[:-1])[None, :]
    return GridInstabilityMap(xs, ys, axis, diffs / spacing)


def gronwall_estimates(gm: GaussianMixture, trajectory) -> tuple[float, float]:
    """Worst-case Lipschitz and curvature magnitudes along a trajectory.

    ``L_hat`` is the maximum operator norm of the velocity Jacobian over
    the trajectory nodes; ``M2_hat`` bounds the second time derivative of
    the path, ``|dv/dt + (dv/dx) v|``, with the time partial estimated by
    central differences over the trajectory's own time stamps.
    """
    times = np.asarray(trajectory.times, dtype=float)
    states = np.asarray(trajectory.states, dtype=float)
    if len(times) == 0:
        raise ValueError("trajectory is empty")

    l_hat = 0.0
    m2_hat = 0.0
    n_nodes = len(times)
    for i in range(n_nodes):
        x, t = states[i], times[i]
        jac = gm.velocity_jacobian(x, t)
        l_hat = max(l_hat, float(np.linalg.svd(jac, compute_uv=False)[0]))

        lo = max(i - 1, 0)
        hi = min(i + 1, n_nodes - 1)
        if hi == lo:
            continue
        dv_dt = (gm.velocity(x, times[hi]) - gm.velocity(x, times[lo])) / (times[hi] - times[lo])
        accel = dv_dt + jac @ gm.velocity(x, t)
        m2_hat = max(m2_hat, float(np.linalg.norm(accel)))
    return l_hat, m2_hat


def recon_error_bound_term(h: float, m2: float, c: float) -> float:
    """Euler-inversion error bound term h * M2 * (C-1) / (2 ln C) * C for C > 1."""
    if h <= 0.0 or m2 <= 0.0:
        raise ValueError("h and M2 must be positive")
    if c <= 1.0:
        raise ValueError("bound requires C > 1")
    return h * m2 * (c - 1.0) / (2.0 * np.log(c)) * c


def point_report(
    gm: GaussianMixture,
    x,
    cfg_inversion: SolverConfig,
    cfg_generation: SolverConfig,
    magnitude: float = 1e-3,
) -> InstabilityReport:
    """Assemble the full per-point instability record for one input.

    Inverts x, propagates the generation Jacobian at the inverted noise,
    reads intrinsic coefficients along all right singular directions,
    realizes each direction at the given perturbation magnitude, and
    attaches the geometric average and the reconstruction error.
    """
    x = np.asarray(x, dtype=float)
    z_hat = invert(gm, x, cfg_inversion)
    x_hat = generate(gm, z_hat, cfg_generation)
    _, jac = integrate_with_jacobian(gm, z_hat, 1.0, 0.0, cfg_generation)

    _, _, vt = np.linalg.svd(jac)
    intrinsic = [
        DirectionalCoefficient(z_hat, vt[i], intrinsic_coefficient(jac, vt[i]))
        for i in range(gm.dim)
    ]
    flow = lambda p: generate(gm, p, cfg_generation)
    realized = [
        (magnitude * vt[i], realized_coefficient(flow, z_hat, magnitude * vt[i]))
        for i in range(gm.dim)
    ]
    return InstabilityReport(
        point=x,
        inverted_noise=z_hat,
        intrinsic_coeffs=intrinsic,
        realized_coeffs=realized,
        geometric_average=geometric_average_via_jacobian(jac),
        reconstruction_error=float(np.linalg.norm(x - x_hat) / np.sqrt(gm.dim)),
    )
