"""Numerical integration of the probability-flow ODE in both directions.

Generation runs the velocity field from t=1 (noise) to t=0 (data);
inversion runs it from t=0 to t=1.  Three integrators are provided:
fixed-step Euler and Heun, and an adaptive Dormand-Prince 5(4) pair
("rk45") with a PI step controller.  Augmented variants integrate the
variational equation J' = (dv/dx) J for the flow-map Jacobian and the
running divergence integral used by the density-ratio identities.

The integrators are pure functions of their arguments: identical inputs
and configuration produce bit-identical outputs.  State may be a single
vector of shape (n,) or a batch (B, n); batched adaptive integration
shares one step controller, with the error norm taken as the worst
per-point norm, so the step sequence is controlled by the least
forgiving point in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixture import GaussianMixture

__all__ = [
    "SolverConfig",
    "Trajectory",
    "IntegrationError",
    "integrate",
    "generate",
    "invert",
    "reconstruct",
    "integrate_with_jacobian",
    "integrate_with_divergence",
    "integrate_variational",
    "integrate_divergence_field",
]

_METHODS = ("euler", "heun", "rk45")

# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order minus embedded fourth-order weights
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_MIN_STEP = 1e-14


class IntegrationError(RuntimeError):
    """Adaptive stepper exhausted its step budget or its step underflowed."""


@dataclass(frozen=True)
class SolverConfig:
    """ODE method selection and accuracy knobs.

    ``steps`` applies to the fixed-step methods; the tolerances and
    ``max_steps`` guard apply to rk45.  Direction is implied by the
    (t_start, t_end) pair passed to the integrator, not stored here.
    """

    method: str = "rk45"
    steps: int = 100
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {_METHODS}")
        if self.method in ("euler", "heun") and self.steps < 1:
            raise ValueError("fixed-step methods require steps >= 1")
        if self.method == "rk45":
            if self.abs_tol <= 0.0 or self.rel_tol <= 0.0:
                raise ValueError("rk45 requires positive tolerances")
            if self.max_steps < 1:
                raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped state sequence from t_start to t_end."""

    times: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


def _check_span(t_start: float, t_end: float) -> None:
    for t in (t_start, t_end):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"integration time {t} outside [0, 1]")
    if t_start == t_end:
        raise ValueError("t_start and t_end must differ")


def _fixed_step(field, y0, t_start, t_end, cfg, record):
    times = np.linspace(t_start, t_end, cfg.steps + 1)
    y = np.array(y0, dtype=float)
    states = [y.copy()] if record else None
    heun = cfg.method == "heun"
    for i in range(cfg.steps):
        t = times[i]
        h = times[i + 1] - t
        k1 = field(y, t)
        if heun:
            k2 = field(y + h * k1, times[i + 1])
            y = y + (0.5 * h) * (k1 + k2)
        else:
            y = y + h * k1
        if record:
            states.append(y.copy())
    traj = Trajectory(times, np.asarray(states)) if record else None
    return y, traj


def _error_norm(err, scale):
    # worst per-point RMS over the batch; plain RMS for a single vector
    ratio = err / scale
    if ratio.ndim == 1:
        return float(np.sqrt(np.mean(ratio * ratio)))
    return float(np.max(np.sqrt(np.mean(ratio * ratio, axis=-1))))


def _dormand_prince(field, y0, t_start, t_end, cfg, record):
    t = float(t_start)
    y = np.array(y0, dtype=float)
    direction = 1.0 if t_end > t_start else -1.0
    h = (t_end - t_start) / 100.0

    times = [t] if record else None
    states = [y.copy()] if record else None

    k = [None] * 7
    k[0] = field(y, t)
    err_prev = 1.0
    attempts = 0

    while (t_end - t) * direction > 0.0:
        if abs(h) < _MIN_STEP:
            raise IntegrationError(f"rk45 step underflow ({abs(h):.3e}) at t={t!r}")
        if attempts >= cfg.max_steps:
            raise IntegrationError(f"rk45 exceeded max_steps={cfg.max_steps} at t={t!r}")
        attempts += 1

        if (t + h - t_end) * direction > 0.0:
            h = t_end - t

        for s in range(1, 7):
            incr = sum(a * ks for a, ks in zip(_DP_A[s], k[:s]))
            k[s] = field(y + h * incr, t + _DP_C[s] * h)

        y_new = y + h * sum(b * ks for b, ks in zip(_DP_B, k) if b != 0.0)
        err_vec = h * sum(e * ks for e, ks in zip(_DP_E, k) if e != 0.0)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err = _error_norm(err_vec, scale)

        if err <= 1.0:
            t_new = t + h
            factor = _SAFETY * err ** -_PI_ALPHA * err_prev**_PI_BETA if err > 0.0 else _MAX_FACTOR
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(err, 1e-10)
            t, y = t_new, y_new
            k[0] = k[6]  # FSAL: last stage doubles as the next first stage
            if record:
                times.append(t)
                states.append(y.copy())
        else:
            h *= min(1.0, max(_MIN_FACTOR, _SAFETY * err ** (-1.0 / 5.0)))

    traj = Trajectory(np.asarray(times), np.asarray(states)) if record else None
    return y, traj


def integrate(field, y_init, t_start: float, t_end: float, cfg: SolverConfig, record: bool = False):
    """Solve y' = field(y, t) from t_start to t_end.

    Returns ``(y_final, trajectory)`` where the trajectory is ``None``
    unless ``record`` is set.  The adaptive method clamps its final step
    exactly onto t_end and raises :class:`IntegrationError` on step
    underflow or when ``max_steps`` attempts are exhausted.
    """
    _check_span(t_start, t_end)
    if cfg.method == "rk45":
        return _dormand_prince(field, y_init, t_start, t_end, cfg, record)
    return _fixed_step(field, y_init, t_start, t_end, cfg, record)


def generate(gm: GaussianMixture, z, cfg: SolverConfig):
    """Generation mapping: run the velocity field from t=1 down to t=0."""
    final, _ = integrate(gm.velocity, z, 1.0, 0.0, cfg)
    return final


def invert(gm: GaussianMixture, x, cfg: SolverConfig):
    """Inversion mapping: run the velocity field from t=0 up to t=1."""
    final, _ = integrate(gm.velocity, x, 0.0, 1.0, cfg)
    return final


def reconstruct(gm: GaussianMixture, x, cfg_inversion: SolverConfig, cfg_generation: SolverConfig):
    """Invert to noise, then regenerate: returns (z_hat, x_hat)."""
    z_hat = invert(gm, x, cfg_inversion)
    x_hat = generate(gm, z_hat, cfg_generation)
    return z_hat, x_hat


def _split_state(x_init):
    x = np.asarray(x_init, dtype=float)
    if x.ndim not in (1, 2):
        raise ValueError("state must be a vector or a batch of vectors")
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def integrate_variational(field, jacobian_field, x_init, t_start, t_end, cfg: SolverConfig):
    """Integrate the state together with the flow-map Jacobian.

    Solves the augmented system x' = field(x, t), J' = jacobian_field(x, t) J
    with J(t_start) = I and returns ``(x_final, J_final)``.  Accepts any
    (field, jacobian) pair, e.g. a constant-matrix linear field for
    validation against the matrix exponential.
    """
    x2d, single = _split_state(x_init)
    b, n = x2d.shape
    jac0 = np.broadcast_to(np.eye(n), (b, n, n)).reshape(b, n * n)
    y0 = np.concatenate([x2d, jac0], axis=1)

    def aug(y, t):
        x = y[:, :n]
        jac = y[:, n:].reshape(b, n, n)
        dx = np.atleast_2d(field(x, t))
        dj = np.einsum("bij,bjk->bik", np.asarray(jacobian_field(x, t)).reshape(b, n, n), jac)
        return np.concatenate([dx, dj.reshape(b, n * n)], axis=1)

    y_final, _ = integrate(aug, y0, t_start, t_end, cfg)
    x_final = y_final[:, :n]
    jac_final = y_final[:, n:].reshape(b, n, n)
    if single:
        return x_final[0], jac_final[0]
    return x_final, jac_final


def integrate_with_jacobian(gm: GaussianMixture, x_init, t_start, t_end, cfg: SolverConfig):
    """Flow-map Jacobian of the mixture flow between the given times."""
    return integrate_variational(gm.velocity, gm.velocity_jacobian, x_init, t_start, t_end, cfg)


def integrate_divergence_field(field, divergence_field, x_init, t_start, t_end, cfg: SolverConfig):
    """Integrate the state together with the running divergence integral.

    Solves x' = field(x, t), s' = divergence_field(x, t) with s(t_start) = 0
    and returns ``(x_final, s_final)``; exp(s_final) equals |det J| of the
    flow map by the trace identity for the variational equation.
    """
    x2d, single = _split_state(x_init)
    b, n = x2d.shape
    y0 = np.concatenate([x2d, np.zeros((b, 1))], axis=1)

    def aug(y, t):
        x = y[:, :n]
        dx = np.atleast_2d(field(x, t))
        ds = np.asarray(divergence_field(x, t), dtype=float).reshape(b, 1)
        return np.concatenate([dx, ds], axis=1)

    y_final, _ = integrate(aug, y0, t_start, t_end, cfg)
    if single:
        return y_final[0, :n], float(y_final[0, n])
    return y_final[:, :n], y_final[:, n]


def integrate_with_divergence(gm: GaussianMixture, x_init, t_start, t_end, cfg: SolverConfig):
    """Accumulated divergence integral along the mixture flow."""
    return integrate_divergence_field(gm.velocity, gm.divergence, x_init, t_start, t_end, cfg)
