"""Covariance tubes around canard solutions.

Deviations from a reference solution with fast coordinate ``x_det(z)`` obey,
to linear order and with z as time,

    mu d(xi, eta) = A(z) (xi, eta) dz + sqrt(mu) sigma F dW,
    A = [[-4 x_det, 2], [-2(mu+1), 0]],   F = diag(sqrt 2, sqrt 2 rho).

Their covariance is sigma^2 V, and V = [[v1, v3], [v3, v2]] solves
mu dV/dz = A V + V A^T + F F^T, which componentwise reads mu v' = B v + E.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate as _quad
from scipy.interpolate import PchipInterpolator

from .model import omega, weak_canard_z
from .odeint import IntegratorConfig, integrate, variational_matrix


class CovarianceError(RuntimeError):
    pass


def weak_x(z):
    return -np.asarray(z, dtype=float)


@dataclass
class CovTriple:
    z: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray

    @classmethod
    def from_array(cls, z, v):
        v = np.asarray(v, dtype=float)
        return cls(np.asarray(z, dtype=float), v[..., 0], v[..., 1], v[..., 2])

    def as_array(self) -> np.ndarray:
        return np.stack([self.v1, self.v2, self.v3], axis=-1)

    def matrix(self) -> np.ndarray:
        return np.stack([np.stack([self.v1, self.v3], -1),
                         np.stack([self.v3, self.v2], -1)], -2)


def b_matrix(x, mu: float) -> np.ndarray:
    x = float(x)
    return np.array([[-8.0 * x, 0.0, 4.0],
                     [0.0, 0.0, -4.0 * (mu + 1.0)],
                     [-2.0 * (mu + 1.0), 2.0, -4.0 * x]])


def forcing(rho: float) -> np.ndarray:
    return np.array([2.0, 2.0 * rho * rho, 0.0])


def _psd_violation(v, tol):
    v = np.atleast_2d(v)
    scale = np.maximum(1.0, np.abs(v[:, :2]).max(axis=1))
    det = v[:, 0] * v[:, 1] - v[:, 2] ** 2
    bad = (v[:, 0] < -tol * scale) | (v[:, 1] < -tol * scale) | (det < -tol * scale ** 2)
    return np.flatnonzero(bad)


def integrate_covariance(x_det: Callable, z0: float, V0, mu: float, rho: float,
                         z_end: float, z_samples=None,
                         config: IntegratorConfig | None = None,
                         psd_tol: float = 1e-9) -> CovTriple:
    """Solve mu dv/dz = B(z) v + E from ``V0`` at ``z0`` and sample it.

    ``V0`` is a triple (v1, v2, v3).  A PSD violation at any sample is an error.
    """
    cfg = config or IntegratorConfig(abs_tol=1e-11, rel_tol=1e-10,
                                     initial_step=1e-4 * mu, max_step=0.02)
    E = forcing(rho)

    def rhs(z, v):
        return (b_matrix(x_det(z), mu) @ v + E) / mu

    v0 = np.asarray(V0, dtype=float)
    if _psd_violation(v0, psd_tol).size:
        raise CovarianceError("initial covariance is not positive semidefinite")
    tr = integrate(rhs, v0, (z0, z_end), cfg)
    if z_samples is None:
        z_samples, v = tr.s, tr.states
    else:
        z_samples = np.asarray(z_samples, dtype=float)
        v = np.atleast_2d(tr(z_samples))
    bad = _psd_violation(v, psd_tol)
    if bad.size:
        raise CovarianceError(f"covariance lost positivity at z={z_samples[bad[0]]:.6g}")
    return CovTriple.from_array(z_samples, v)


class ExpansionDisordered(ValueError):
    """The slow-manifold expansion is only ordered for |z| >> sqrt(mu)."""


def asymptotic_covariance(z: float, mu: float, rho: float,
                          x_det: Callable = weak_x, order: int = 1,
                          guard: float = 1.0) -> np.ndarray:
    """Partial sum of the slow-manifold expansion sum_j mu^j V*_j(z).

    V*_0 = -B^{-1} E is the quasi-static covariance; higher terms follow from
    V*_{j+1} = B^{-1} dV*_j/dz, differentiated numerically.  Points with
    |z| < guard * sqrt(mu) are rejected.
    """
    if abs(z) < guard * np.sqrt(mu):
        raise ExpansionDisordered(f"|z|={abs(z):.3g} too close to the fold for mu={mu}")
    E = forcing(rho)

    def term(j):
        if j == 0:
            return lambda zz: np.linalg.solve(b_matrix(x_det(zz), mu), -E)
        prev = term(j - 1)

        def tj(zz):
            h = 1e-3 * max(abs(zz), np.sqrt(mu))
            d = (-prev(zz + 2 * h) + 8 * prev(zz + h) - 8 * prev(zz - h)
                 + prev(zz - 2 * h)) / (12 * h)
            return np.linalg.solve(b_matrix(x_det(zz), mu), d)
        return tj

    return sum(mu ** j * term(j)(z) for j in range(order + 1))


# --- canonical frame -------------------------------------------------------

@dataclass
class CanonicalFrame:
    z: float
    S: np.ndarray
    dS: np.ndarray
    a: float
    varpi: float


_REAL_FORM = np.array([[1j, 1.0], [1.0, 1j]]) / (1 + 1j)


def _eigen_frame(z, mu):
    """S0 S1 and its z-derivative (columns: complex-conjugate eigenvectors / sqrt(omega))."""
    w = omega(z, mu)
    dw = -z / w
    s0 = np.array([[(-z - 1j * w) / (1 + mu), (-z + 1j * w) / (1 + mu)], [1.0, 1.0]])
    ds0 = np.array([[(-1 - 1j * dw) / (1 + mu), (-1 + 1j * dw) / (1 + mu)], [0.0, 0.0]])
    r = w ** -0.5
    dr = -0.5 * w ** -1.5 * dw
    return s0 * r, ds0 * r + s0 * dr


def _rotation_coefficients(z, mu):
    """omega2 and rho2 of the transformed system mu u' = (2z + [[i w2, mu conj(r2)], [mu r2, -i w2]]) u."""
    w = omega(z, mu)
    return 2 * w + mu / (2 * w), (-1j - z / w) / (2 * w)


class RiccatiFrame:
    """Bounded solution of the Riccati equation that diagonalizes the rotation.

    mu v' = rho2 - 2 i omega2 v - mu^2 conj(rho2) v^2, started from the
    quasi-static value rho2 / (2 i omega2) at the left end of the interval.
    """

    def __init__(self, mu: float, z_min: float = -0.95, z_max: float = 0.95):
        self.mu, self.z_min, self.z_max = mu, z_min, z_max
        w2, r2 = _rotation_coefficients(z_min, mu)
        v0 = r2 / (2j * w2)
        cfg = IntegratorConfig(abs_tol=1e-13, rel_tol=1e-12,
                               initial_step=1e-4 * mu, max_step=0.05 * mu)
        self.traj = integrate(self._rhs, np.array([v0.real, v0.imag]),
                              (z_min, z_max), cfg)

    def _vdot(self, z, v):
        mu = self.mu
        w2, r2 = _rotation_coefficients(z, mu)
        return (r2 - 2j * w2 * v - mu * mu * np.conj(r2) * v * v) / mu

    def _rhs(self, z, y):
        d = self._vdot(z, y[0] + 1j * y[1])
        return np.array([d.real, d.imag])

    def __call__(self, z) -> complex:
        if not self.z_min <= z <= self.z_max:
            raise ValueError(f"z={z} outside the Riccati interval")
        y = self.traj(z)
        return y[0] + 1j * y[1]

    def frame(self, z: float) -> CanonicalFrame:
        mu = self.mu
        v = self(z)
        dv = self._vdot(z, v)
        e, de = _eigen_frame(z, mu)
        s2 = np.array([[1.0, mu * np.conj(v)], [mu * v, 1.0]])
        ds2 = np.array([[0.0, mu * np.conj(dv)], [mu * dv, 0.0]])
        S = e @ s2 @ _REAL_FORM
        dS = (de @ s2 + e @ ds2) @ _REAL_FORM
        w2, r2 = _rotation_coefficients(z, mu)
        rho1 = 1j * w2 + mu * mu * np.conj(r2) * v
        return CanonicalFrame(z, S.real, dS.real, 2 * z + rho1.real, rho1.imag)


@lru_cache(maxsize=16)
def _riccati(mu: float) -> RiccatiFrame:
    return RiccatiFrame(mu)


def canonical_frame(z: float, mu: float) -> CanonicalFrame:
    """Real frame S(z) in which the weak-canard variational flow is a scaled rotation."""
    omega(z, mu)
    if abs(z) >= 0.95:
        raise ValueError("canonical frame is tabulated on |z| < 0.95")
    return _riccati(float(mu)).frame(float(z))


def leading_frame(z, mu: float) -> np.ndarray:
    """Frame without the Riccati correction: the mu -> 0 form of canonical_frame."""
    e, _ = _eigen_frame(z, mu)
    return (e @ _REAL_FORM).real


def canonical_residual(z: float, mu: float, leading: bool = True) -> float:
    """Max-norm of S^{-1}(A S - mu S') minus the rotation generator.

    With ``leading`` the generator is [[2z, 2w], [-2w, 2z]], so the residual
    measures the O(mu) size of the canonical-form corrections; otherwise the
    frame's own (a, varpi) are used and the residual reflects solver accuracy.
    """
    fr = canonical_frame(z, mu)
    A = variational_matrix(weak_x(z), mu)
    G = np.linalg.solve(fr.S, A @ fr.S - mu * fr.dS)
    if leading:
        a, w = 2 * z, 2 * omega(z, mu)
    else:
        a, w = fr.a, fr.varpi
    return float(np.abs(G - np.array([[a, w], [-w, a]])).max())


def averaged_radius(z, z0, mu: float):
    return np.exp((np.square(z) - z0 * z0) / mu)


# --- Lyapunov function -----------------------------------------------------

def lyapunov_matrix(x: float) -> np.ndarray:
    """Closed-form M with B^T M + M B = -x I for the mu = 0 covariance operator."""
    x2 = x * x
    M = np.array([
        [7 + 12 * x2, 1 + 12 * x2, -12 * x],
        [1 + 12 * x2, 7 + 64 * x2 + 48 * x2 * x2, -16 * x * (1 + 3 * x2)],
        [-12 * x, -16 * x * (1 + 3 * x2), 4 * (3 + 18 * x2)],
    ])
    return M / (64 * (1 + 3 * x2))


# --- tube diagnostics ------------------------------------------------------

def theta_diagnostic(z: float, z0: float, mu: float,
                     x_det: Callable = weak_x) -> float:
    """Theta(z) = (1/mu) int_{z0}^z exp(-alpha(z, s)/mu) ds with alpha(z, s) = int_s^z 2 x_det."""
    if z == z0:
        return 0.0
    if x_det is weak_x:
        # alpha(z, s) = s^2 - z^2 in closed form
        def g(s):
            return np.exp((z * z - s * s) / mu)
    else:
        def g(s):
            alpha = _quad.quad(lambda u: 2 * x_det(u), s, z, epsabs=1e-13)[0]
            return np.exp(-alpha / mu)
    pts = [0.0] if z0 < 0 < z else None
    val = _quad.quad(g, z0, z, epsabs=1e-12, epsrel=1e-11, limit=400, points=pts)[0]
    return val / mu


def tube_norms(v1, v2, v3) -> tuple:
    """(K+^2, K-^2): norms of V and of V^{-1} from the closed-form eigenvalues of V^2."""
    v1, v2, v3 = (np.asarray(a, dtype=float) for a in (v1, v2, v3))
    if np.any(v1 * v2 - v3 * v3 <= 0) or np.any(v1 <= 0):
        raise CovarianceError("tube norms need a positive definite covariance")
    base = v1 * v1 + v2 * v2 + 2 * v3 * v3
    root = (v1 + v2) * np.sqrt((v1 - v2) ** 2 + 4 * v3 * v3)
    big = 0.5 * (base + root)
    # small eigenvalue via the determinant to avoid cancellation
    small = (v1 * v2 - v3 * v3) ** 2 / big
    return np.sqrt(big), 1.0 / np.sqrt(small)


class TubeSpec:
    """Covariance tube {(x, y): <d, Vbar(z)^{-1} d> < r^2} around a reference solution."""

    def __init__(self, x_ref: Callable, y_ref: Callable, cov: CovTriple, r: float):
        if r <= 0:
            raise ValueError("tube scale r must be positive")
        z = cov.z
        if np.any(np.diff(z) <= 0):
            order = np.argsort(z)
            cov = CovTriple(z[order], cov.v1[order], cov.v2[order], cov.v3[order])
            z = cov.z
        self.x_ref, self.y_ref, self.cov, self.r = x_ref, y_ref, cov, r
        tube_norms(cov.v1, cov.v2, cov.v3)  # validates positive definiteness
        self._interp = PchipInterpolator(z, cov.as_array(), axis=0)
        self.z_min, self.z_max = z[0], z[-1]

    def vbar(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if np.any(z < self.z_min - 1e-12) or np.any(z > self.z_max + 1e-12):
            raise ValueError("z outside the tube span")
        v = self._interp(z)
        det = v[..., 0] * v[..., 1] - v[..., 2] ** 2
        if np.any(det <= 0) or np.any(v[..., 0] <= 0):
            raise CovarianceError("interpolated covariance is not positive definite")
        return v

    def quadratic_form(self, dx, dy, z):
        v = self.vbar(z)
        det = v[..., 0] * v[..., 1] - v[..., 2] ** 2
        return (v[..., 1] * dx * dx - 2 * v[..., 2] * dx * dy + v[..., 0] * dy * dy) / det

    def membership(self, xy, z) -> tuple:
        """(inside, q) for an absolute point (x, y) at time z."""
        dx = xy[0] - self.x_ref(z)
        dy = xy[1] - self.y_ref(z)
        q = self.quadratic_form(dx, dy, z)
        return q < self.r ** 2, q


def tube_membership(xy, z, spec: TubeSpec) -> tuple:
    return spec.membership(xy, z)


@dataclass(frozen=True)
class EscapeSetSpec:
    """D(eta): disc of radius eta sqrt(z) around the weak canard, for z >= sqrt(mu)."""
    eta: float
    mu: float

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def radius2(self, z):
        return self.eta ** 2 * np.asarray(z)

    def distance2(self, x, y, z):
        xw, yw = weak_canard_z(z, self.mu)
        return (x - xw) ** 2 + (y - yw) ** 2


def escape_set_membership(xy, z: float, spec: EscapeSetSpec) -> bool:
    if z < np.sqrt(spec.mu) - 1e-14:
        raise ValueError("the escape set is defined for z >= sqrt(mu)")
    return bool(spec.distance2(xy[0], xy[1], z) < spec.radius2(z))
