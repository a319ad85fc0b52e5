"""Simultaneous-implicit step solvers (trapezoidal, backward Euler), step-size
control and the partitioned fourth-order Runge-Kutta comparator.

Any object exposing ``n`` (differential size), ``n_alg`` (algebraic size)
and ``parts(x, V, jac)`` returning a :class:`~cascadesim.dae.Parts` can be
stepped; the island model is one such system, the scalar test equation used
for stability checks another.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from cascadesim.dae import Parts

METHODS = ("TM", "BEM", "RK4")


class SingularJacobianError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "BEM"
    dt_min: float = 0.02
    dt_max: float = 0.4
    eps: float = 1e-4
    max_newton_iters: int = 10
    k: int = 6
    r: int = 7
    tau: float = 0.05
    dt_event: float = 0.002
    lte_tol: float = 1e-3
    dt_rk4: float = 0.002

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown integration method {self.method!r}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")
        if min(self.k, self.r, self.max_newton_iters) < 1:
            raise ValueError("k, r and max_newton_iters must be at least 1")
        if not (self.eps > 0 and self.tau > 0 and self.dt_event > 0 and self.lte_tol > 0):
            raise ValueError("tolerances and step sizes must be positive")

    @classmethod
    def ground_truth(cls) -> "IntegratorConfig":
        return cls(method="TM", dt_min=0.002, dt_max=1.0)

    @classmethod
    def for_method(cls, method: str, **overrides) -> "IntegratorConfig":
        base = cls.ground_truth() if method == "TM" else cls(method=method)
        return replace(base, **overrides)


@dataclass
class StepResult:
    x: np.ndarray
    V: np.ndarray
    iterations: int
    converged: bool
    mismatch_inf: float
    dt: float
    f0_norm: float = 0.0
    f_next: np.ndarray | None = None


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


DENSE_LU_MAX = 400  # above this size the Newton matrix is factored sparse


class _DenseLU:
    def __init__(self, J):
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                self.lu = lu_factor(J, check_finite=False)
            except (LinAlgWarning, ValueError) as exc:
                raise SingularJacobianError(str(exc)) from None
        if not np.all(np.isfinite(self.lu[0].diagonal())) or np.min(np.abs(self.lu[0].diagonal())) == 0.0:
            raise SingularJacobianError("singular Newton matrix")

    def solve(self, b):
        return lu_solve(self.lu, b, check_finite=False)


def _factor(J):
    if isinstance(J, np.ndarray) and J.shape[0] <= DENSE_LU_MAX:
        return _DenseLU(J)
    try:
        return splu(csc_matrix(J))
    except RuntimeError as exc:
        raise SingularJacobianError(str(exc)) from None


def newton_solve(fun, z0, eps: float, max_iter: int, min_iter: int = 1, damped: bool = False):
    """Newton iteration on a stacked unknown ``z``.

    ``fun(z, jac)`` returns ``(residual, jacobian_or_None)``. At least
    ``min_iter`` updates are taken so the returned point is never the raw
    guess. With ``damped`` each update is halved until the residual
    2-norm decreases. Returns ``(z, iterations, converged, final_norm,
    first_norm)``.
    """
    z = np.array(z0, dtype=float)
    r, J = fun(z, True)
    first = norm = _inf_norm(r)
    it = 0
    while it < max_iter and (it < min_iter or norm > eps):
        if not np.isfinite(norm):
            break
        if J is None:
            _, J = fun(z, True)
        dz = _factor(J).solve(-r)
        it += 1
        if damped:
            merit = float(r @ r)
            a = 1.0
            while True:
                r_try, _ = fun(z + a * dz, False)
                if np.all(np.isfinite(r_try)) and float(r_try @ r_try) < (1.0 - 1e-4 * a) * merit:
                    break
                a *= 0.5
                if a < 1e-3:
                    break
            z = z + a * dz
            r, J = r_try, None
        else:
            z = z + dz
            r, J = fun(z, False)
        norm = _inf_norm(r)
    converged = bool(np.isfinite(norm) and norm <= eps)
    return z, it, converged, norm, first


def _step_jacobian(parts: Parts, h: float, n: int):
    top = np.hstack([np.eye(n) - h * parts.fx, -h * parts.fV])
    bot = np.hstack([parts.gx, parts.gV])
    return np.vstack([top, bot])


def implicit_step(system, x_n, V_n, dt: float, method: str, cfg: IntegratorConfig,
                  f_n: np.ndarray | None = None, mask: np.ndarray | None = None) -> StepResult:
    """One TM or BEM step solved simultaneously for ``(x_{n+1}, V_{n+1})``."""
    n = system.n
    if method not in ("BEM", "TM"):
        raise ValueError(f"implicit_step does not handle {method!r}")
    h = dt if method == "BEM" else 0.5 * dt
    if f_n is None:
        f_n = system.parts(x_n, V_n).f
    base = x_n + h * f_n if method == "TM" else x_n
    last = {}

    def fun(z, jac):
        x, V = z[:n], z[n:]
        p = system.parts(x, V, jac)
        res = np.concatenate([x - base - h * p.f, p.g])
        last["f"] = p.f
        return res, (_step_jacobian(p, h, n) if jac else None)

    z0 = np.concatenate([x_n, V_n])
    z, it, ok, norm, _ = newton_solve(fun, z0, cfg.eps, cfg.max_newton_iters)
    # mismatch of the differential equations at the initial guess
    r0 = -dt * f_n
    if mask is not None:
        r0 = r0[mask]
    return StepResult(x=z[:n], V=z[n:], iterations=it, converged=ok, mismatch_inf=norm,
                      dt=dt, f0_norm=_inf_norm(r0), f_next=last.get("f"))


def step_bem(system, x_n, V_n, dt, cfg: IntegratorConfig, f_n=None, mask=None) -> StepResult:
    return implicit_step(system, x_n, V_n, dt, "BEM", cfg, f_n=f_n, mask=mask)


def step_tm(system, x_n, V_n, dt, cfg: IntegratorConfig, f_n=None, mask=None) -> StepResult:
    return implicit_step(system, x_n, V_n, dt, "TM", cfg, f_n=f_n, mask=mask)


def solve_algebraic(system, x, V0, eps: float, max_iter: int = 20, damped: bool = False):
    """Newton on ``g(x, V) = 0`` for fixed ``x`` using the ``dg/dV`` block.

    Returns ``(V, converged, final_norm, iterations)``.
    """
    if system.n_alg == 0:
        return np.array(V0, dtype=float), True, 0.0, 0

    def fun(V, jac):
        p = system.parts(x, V, jac)
        return p.g, (p.gV if jac else None)

    V, it, ok, norm, _ = newton_solve(fun, V0, eps, max_iter, min_iter=0, damped=damped)
    return V, ok, norm, it


# ---------------------------------------------------------------------------
# step-size control
# ---------------------------------------------------------------------------

def adapt_step_bem(dt_n: float, f0_norm: float, cfg: IntegratorConfig) -> float:
    """Next step from the largest component of the first mismatch vector."""
    if f0_norm == 0.0:
        return cfg.dt_max
    return float(np.clip(dt_n * cfg.tau / f0_norm, cfg.dt_min, cfg.dt_max))


def estimate_lte(x_tm, x_n, f_n, dt, mask=None) -> float:
    """Distance between the TM solution and a forward-Euler predictor."""
    d = x_tm - (x_n + dt * f_n)
    if mask is not None:
        d = d[mask]
    return _inf_norm(d)


def adapt_step_tm(lte: float, dt_n: float, cfg: IntegratorConfig) -> tuple[bool, float]:
    """Accept/reject decision and the next step for the trapezoidal controller."""
    if lte > cfg.lte_tol:
        return False, max(0.5 * dt_n, cfg.dt_min)
    growth = 2.0 if lte == 0.0 else min(2.0, 0.9 * np.sqrt(cfg.lte_tol / lte))
    growth = max(growth, 0.5)
    return True, float(np.clip(dt_n * growth, cfg.dt_min, cfg.dt_max))


# ---------------------------------------------------------------------------
# partitioned explicit comparator
# ---------------------------------------------------------------------------

def step_rk4_partitioned(system, x_n, V_n, dt: float, cfg: IntegratorConfig) -> StepResult:
    """Classical RK4 on the differential states; ``V`` re-solved at every stage."""
    V = V_n
    ks = []
    x_stage = x_n
    iters = 0
    for c in (0.0, 0.5, 0.5, 1.0):
        if ks:
            x_stage = x_n + c * dt * ks[-1]
        if not np.all(np.isfinite(x_stage)):
            return StepResult(x_stage, V, iters, False, np.inf, dt)
        V, ok, norm, it = solve_algebraic(system, x_stage, V, cfg.eps, cfg.max_newton_iters)
        iters += it
        if not ok:
            return StepResult(x_stage, V, iters, False, norm, dt)
        ks.append(system.parts(x_stage, V).f)
    x_next = x_n + dt / 6.0 * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
    if not np.all(np.isfinite(x_next)):
        return StepResult(x_next, V, iters, False, np.inf, dt)
    V_next, ok, norm, it = solve_algebraic(system, x_next, V, cfg.eps, cfg.max_newton_iters)
    return StepResult(x_next, V_next, iters + it, ok, norm, dt)


class LinearTestSystem:
    """Dahlquist test equation ``x' = lam x`` in real 2-vector form."""

    n_alg = 0

    def __init__(self, lam: complex):
        a, b = complex(lam).real, complex(lam).imag
        self.A = np.array([[a, -b], [b, a]])
        self.n = 2

    def parts(self, x, V, jac=False):
        f = self.A @ x
        empty = np.zeros(0)
        if not jac:
            return Parts(f, empty)
        return Parts(f, empty, self.A.copy(), np.zeros((2, 0)), np.zeros((0, 2)), np.zeros((0, 0)))

    def control_mask(self):
        return np.ones(2, dtype=bool)


def measure_amplification(lam_dt: complex, method: str) -> complex:
    """Numerically measured ``x_{n+1}/x_n`` of one step on the test equation."""
    sys_ = LinearTestSystem(lam_dt)
    cfg = IntegratorConfig(method=method if method != "RK4" else "BEM", eps=1e-14, max_newton_iters=3)
    x0 = np.array([1.0, 0.0])
    if method == "RK4":
        res = step_rk4_partitioned(sys_, x0, np.zeros(0), 1.0, cfg)
    else:
        res = implicit_step(sys_, x0, np.zeros(0), 1.0, method, cfg)
    return complex(res.x[0], res.x[1])
