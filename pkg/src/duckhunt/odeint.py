"""Adaptive Dormand-Prince 5(4) integration with dense output and section events.

The stepper works on arrays of any shape; the error norm is the maximum over
all components, so a batch of independent trajectories sharing one time grid
is controlled as strictly as each member would be on its own.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as _quad

from .model import omega

# Butcher tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between the 5th and embedded 4th order weights
E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200,
              -22 / 525, 1 / 40])
# dense output: weights b_j(theta) = sum_m P[j, m] theta^(m+1)
P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608,
     -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933,
     87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304,
     -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408,
     701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883,
     -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class IntegrationError(RuntimeError):
    """Integration failure; ``reason`` is one of step-underflow, max-steps, non-finite."""

    def __init__(self, reason: str, s: float, message: str = ""):
        super().__init__(f"{reason} at s={s:.6g}" + (f": {message}" if message else ""))
        self.reason = reason
        self.s = s


@dataclass(frozen=True)
class IntegratorConfig:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    initial_step: float = 1e-3
    max_step: float = 1.0
    min_step: float = 1e-12
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not (0 < self.min_step <= self.initial_step <= self.max_step):
            raise ValueError("need 0 < min_step <= initial_step <= max_step")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class SectionEvent:
    """Hyperplane section ``state[component] = value`` crossed in ``direction``.

    direction: +1 upward crossings only, -1 downward only, 0 both.
    """
    component: int
    value: float
    direction: int = 0

    def __call__(self, state):
        return state[self.component] - self.value


@dataclass
class Crossing:
    s: float
    state: np.ndarray
    member: tuple = ()


@dataclass
class Trajectory:
    s: np.ndarray
    states: np.ndarray
    stages: np.ndarray | None = None
    crossings: list = field(default_factory=list)
    reversed_time: bool = False

    @property
    def end(self) -> np.ndarray:
        return self.states[-1]

    def __call__(self, s) -> np.ndarray:
        """Dense-output evaluation at time(s) ``s``."""
        if self.stages is None:
            raise ValueError("trajectory was integrated without dense output")
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        grid = self.s if not self.reversed_time else -self.s
        q = s_arr if not self.reversed_time else -s_arr
        if np.any(q < grid[0] - 1e-12 * max(1, abs(grid[0]))) or np.any(
                q > grid[-1] + 1e-12 * max(1, abs(grid[-1]))):
            raise ValueError("dense output requested outside the integrated span")
        idx = np.clip(np.searchsorted(grid, q, side="right") - 1, 0, len(grid) - 2)
        h = grid[idx + 1] - grid[idx]
        theta = (q - grid[idx]) / h
        out = []
        for i, th, hh in zip(idx, theta, h):
            out.append(_dense(self.states[i], self.stages[i], th, hh))
        out = np.array(out)
        return out[0] if np.ndim(s) == 0 else out

    def to_csv(self, path) -> None:
        """Write columns (s, x, y, z)."""
        data = np.column_stack([self.s, self.states[:, :3]])
        np.savetxt(path, data, delimiter=",", header="s,x,y,z", comments="",
                   fmt="%.17g")


def _dense(y0, k, theta, h):
    w = P @ (theta ** np.arange(1, 5))
    return y0 + h * np.tensordot(w, k, axes=1)


def _error_norm(err, y0, y1, cfg):
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.max(np.abs(err) / scale))


def _elapsed(field_fn, s0, backward):
    """Field in elapsed time tau >= 0; backward runs use the time-reversed field."""
    if backward:
        return lambda tau, y: -field_fn(s0 - tau, y)
    return lambda tau, y: field_fn(s0 + tau, y)


def integrate(field_fn: Callable, p0, s_span: Sequence[float],
              config: IntegratorConfig | None = None,
              events: Sequence[SectionEvent] = (),
              dense: bool = True, store: bool = True,
              terminal: bool = False) -> Trajectory:
    """Integrate ``dp/ds = field_fn(s, p)`` over ``s_span``.

    ``p0`` may carry batch axes after the component axis.  Section events are
    root-polished by bisection on the dense interpolant until the residual is
    below ``abs_tol``.  With ``terminal`` the integration stops at the first
    crossing (scalar trajectories only).  ``store=False`` keeps only the end
    state and the crossings, which bounds memory for large batches.
    """
    cfg = config or IntegratorConfig()
    s0, s1 = float(s_span[0]), float(s_span[1])
    backward = s1 < s0
    f = _elapsed(field_fn, s0, backward)
    t, t_end = 0.0, abs(s1 - s0)

    def true_s(tau):
        return s0 - tau if backward else s0 + tau

    y = np.array(p0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite", s0, "initial state")
    ts, ys, ks = [true_s(0.0)], [y.copy()], []
    crossings: list[Crossing] = []
    if t_end == 0.0:
        return Trajectory(np.array(ts), np.array(ys), None, crossings, backward)

    h = min(cfg.initial_step, cfg.max_step, t_end)
    k = np.empty((7,) + y.shape)
    k[0] = f(t, y)
    g_prev = [ev(y) for ev in events]
    n = 0
    done = False
    while not done:
        if n >= cfg.max_steps:
            raise IntegrationError("max-steps", true_s(t))
        last = t + h >= t_end
        if last:
            h = t_end - t
        for i in range(1, 7):
            yi = y + h * np.tensordot(A[i], k[:i], axes=1)
            k[i] = f(t + C[i] * h, yi)
        y_new = y + h * np.tensordot(B[:6], k[:6], axes=1)
        # the seventh stage is f(t+h, y_new) only after y_new is final
        k[6] = f(t + h, y_new)
        err_vec = h * np.tensordot(E, k, axes=1)
        if not np.all(np.isfinite(y_new)):
            err = np.inf
        else:
            err = _error_norm(err_vec, y, y_new, cfg)
        if err <= 1.0:
            n += 1
            step_k = k.copy()
            new_cross = []
            g_new = []
            for j, ev in enumerate(events):
                gn = ev(y_new)
                g_new.append(gn)
                new_cross += _locate(ev, g_prev[j], gn, y, step_k, t, h, cfg,
                                     true_s)
            g_prev = g_new
            t += h
            y = y_new
            if store:
                ts.append(true_s(t))
                ys.append(y.copy())
                if dense:
                    ks.append(step_k)
            if new_cross:
                new_cross.sort(key=lambda c: abs(c.s - s0))
                crossings.extend(new_cross)
                if terminal:
                    c = new_cross[0]
                    if store:
                        ts[-1] = c.s
                        ys[-1] = c.state.copy()
                        if dense:
                            # shortened final step so dense output ends at the hit
                            ks[-1] = _restage(f, ys[-2], t - h, abs(c.s - ts[-2]))
                    y = c.state
                    t = abs(c.s - s0)
                    break
            done = last
            k[0] = k[6]
            fac = 10.0 if err == 0 else min(10.0, max(0.2, 0.9 * err ** -0.2))
            h = min(h * fac, cfg.max_step)
        else:
            if not np.isfinite(err):
                if h <= cfg.min_step:
                    raise IntegrationError("non-finite", true_s(t))
                h = max(h * 0.1, cfg.min_step)
            else:
                h = h * max(0.2, 0.9 * err ** -0.2)
            if h < cfg.min_step:
                raise IntegrationError("step-underflow", true_s(t),
                                       f"error norm {err:.3g}")
    if not store:
        ts, ys = [ts[0], true_s(t)], [ys[0], y]
        ks = []
    stages = np.array(ks) if (store and dense and ks) else None
    return Trajectory(np.array(ts), np.array(ys), stages, crossings, backward)


def _restage(f, y0, t0, h):
    k = np.empty((7,) + np.shape(y0))
    k[0] = f(t0, y0)
    for i in range(1, 7):
        k[i] = f(t0 + C[i] * h, y0 + h * np.tensordot(A[i], k[:i], axes=1))
    return k


def _locate(ev, g0, g1, y0, k, t, h, cfg, true_s):
    """Bisection on the dense interpolant for all members that changed sign."""
    g0 = np.asarray(g0)
    g1 = np.asarray(g1)
    if ev.direction > 0:
        hit = (g0 < 0) & (g1 >= 0)
    elif ev.direction < 0:
        hit = (g0 > 0) & (g1 <= 0)
    else:
        hit = ((g0 < 0) & (g1 >= 0)) | ((g0 > 0) & (g1 <= 0))
    if not np.any(hit):
        return []
    out = []
    if g0.ndim == 0:
        members = [()]
    else:
        members = [tuple(m) for m in np.argwhere(hit)]
    for m in members:
        sl = (slice(None),) + m
        y0m, km = y0[sl], k[(slice(None), slice(None)) + m]
        lo, hi = 0.0, 1.0
        glo = float(g0[m])
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            ym = _dense(y0m, km, mid, h)
            gm = float(ev(ym))
            if abs(gm) < cfg.abs_tol and (hi - lo) * h < 1e-3:
                break
            if np.sign(gm) == np.sign(glo) and gm != 0.0:
                lo, glo = mid, gm
            else:
                hi = mid
            if (hi - lo) * h < 1e-15 * max(1.0, abs(t)):
                break
        out.append(Crossing(true_s(t + mid * h), ym, m))
    return out


# --- variational equation --------------------------------------------------

@dataclass
class PrincipalSolution:
    z0: float
    z: np.ndarray
    U: np.ndarray  # shape (len(z), 2, 2)


def variational_matrix(x_det, mu: float) -> np.ndarray:
    """A = [[-4x, 2], [-2(mu+1), 0]] along a reference path with fast coordinate x."""
    x = np.asarray(x_det, dtype=float)
    return np.array([[-4.0 * x, 2.0 + 0 * x], [-2.0 * (mu + 1.0) + 0 * x, 0 * x]])


def principal_solution(z0: float, z, mu: float, x_det: Callable,
                       config: IntegratorConfig | None = None) -> PrincipalSolution:
    """Solve mu dU/dz = A(x_det(z)) U with U(z0) = I, sampled at ``z``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    cfg = config or IntegratorConfig(abs_tol=1e-13, rel_tol=1e-11,
                                     initial_step=1e-4 * mu, max_step=0.05)

    def rhs(zz, u):
        a = variational_matrix(x_det(zz), mu)
        return (a @ u.reshape(2, 2)).ravel() / mu

    U = np.empty((len(z), 2, 2))
    order = np.argsort(np.abs(z - z0))
    cur_z, cur_u = z0, np.eye(2).ravel()
    for i in order:
        # integrate outward from z0 so every sample reuses the previous leg
        if np.sign(z[i] - z0) != np.sign(cur_z - z0) and cur_z != z0:
            cur_z, cur_u = z0, np.eye(2).ravel()
        tr = integrate(rhs, cur_u, (cur_z, z[i]), cfg, dense=False, store=False)
        cur_z, cur_u = z[i], tr.end
        U[i] = cur_u.reshape(2, 2)
    return PrincipalSolution(z0, z, U)


def alpha_phase(z: float, z0: float, mu: float, a: Callable | None = None,
                varpi: Callable | None = None, tol: float = 1e-10) -> tuple:
    """Contraction exponent alpha = int a and phase phi = int varpi from z0 to z.

    Defaults are the leading-order rates a = 2z and varpi = 2 omega(z).
    """
    if a is None:
        a = lambda s: 2.0 * s
    if varpi is None:
        omega(np.array([z, z0]), mu)  # domain check
        varpi = lambda s: 2.0 * omega(s, mu)
    if z == z0:
        return 0.0, 0.0
    alpha = _quad.quad(a, z0, z, epsabs=tol, epsrel=tol, limit=200)[0]
    phi = _quad.quad(varpi, z0, z, epsabs=tol, epsrel=tol, limit=200)[0]
    return alpha, phi
