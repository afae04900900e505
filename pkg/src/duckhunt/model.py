"""Folded-node normal form, global-return model and coordinate maps.

States are arrays whose leading axis holds the components (x, y, z), so
every field below accepts either a single point of shape (3,) or a batch
of shape (3, n).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np


class Frame(str, enum.Enum):
    ORIGINAL = "original"
    BLOWN_UP = "blownup"


class CanardBranch(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"

    def eigenvalue(self, mu: float) -> float:
        return -1.0 if self is CanardBranch.STRONG else -mu


class DomainError(ValueError):
    """Raised when a formula is evaluated outside its region of validity."""


@dataclass(frozen=True)
class SystemParams:
    mu: float
    eps: float = 0.01
    sigma: float = 0.0
    sigma_prime: float = 0.0
    frame: Frame = Frame.BLOWN_UP

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")
        if not self.eps > 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.sigma < 0.0 or self.sigma_prime < 0.0:
            raise ValueError("noise intensities must be non-negative")
        object.__setattr__(self, "frame", Frame(self.frame))

    @property
    def rho(self) -> float:
        """Ratio of slow to fast noise intensity (nan when sigma = 0)."""
        if self.sigma == 0.0:
            return float("nan")
        return self.sigma_prime / self.sigma

    def to_frame(self, frame: Frame) -> "SystemParams":
        """Convert the noise intensities to another frame."""
        frame = Frame(frame)
        if frame is self.frame:
            return self
        if frame is Frame.BLOWN_UP:
            scale = self.eps ** -0.75
        else:
            scale = self.eps ** 0.75
        return replace(self, sigma=self.sigma * scale,
                       sigma_prime=self.sigma_prime * scale, frame=frame)


@dataclass(frozen=True)
class GlobalReturnParams:
    a: float
    b: float
    system: SystemParams

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("return coefficients must be finite")


class PhasePoint(NamedTuple):
    x: float | np.ndarray
    y: float | np.ndarray
    z: float | np.ndarray
    s: float | np.ndarray = 0.0


# Parameter sets of the two global-return experiments (original frame).
JUMP_DENSITY_PARAMS = GlobalReturnParams(
    a=0.2, b=-1.1,
    system=SystemParams(mu=0.143, eps=0.01, sigma=0.005, sigma_prime=0.0,
                        frame=Frame.ORIGINAL))
TWO_LAO_PARAMS = GlobalReturnParams(
    a=-0.1, b=-0.5,
    system=SystemParams(mu=0.029, eps=0.01, sigma=0.005, sigma_prime=0.005,
                        frame=Frame.ORIGINAL))


def drift_normal_form(p, params: SystemParams) -> np.ndarray:
    """Drift of the folded-node normal form in the frame of ``params``."""
    x, y, z = p[0], p[1], p[2]
    mu = params.mu
    fast = y - x * x
    if params.frame is Frame.ORIGINAL:
        fast = fast / params.eps
    return np.array([fast, -(mu + 1.0) * x - z, 0.5 * mu + 0.0 * x])


def drift_global_return(p, params: GlobalReturnParams) -> np.ndarray:
    """Drift of the cubic global-return model (original frame)."""
    x, y, z = p[0], p[1], p[2]
    sp = params.system
    return np.array([
        (y - x * x - x * x * x) / sp.eps,
        -(sp.mu + 1.0) * x - z,
        0.5 * sp.mu + params.a * x + params.b * x * x,
    ])


def diffusion_matrix(params: SystemParams) -> np.ndarray:
    """Diagonal noise matrix acting on (x, y); z is never forced."""
    if params.frame is Frame.ORIGINAL:
        return np.diag([params.sigma / np.sqrt(params.eps), params.sigma_prime])
    return np.diag([params.sigma, params.sigma_prime])


def blow_up(p: PhasePoint, eps: float) -> PhasePoint:
    """Map an original-frame point to blown-up coordinates."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    r = np.sqrt(eps)
    return PhasePoint(p.x / r, p.y / eps, p.z / r, p.s / r)


def blow_down(p: PhasePoint, eps: float) -> PhasePoint:
    """Map a blown-up point back to the original frame."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    r = np.sqrt(eps)
    return PhasePoint(p.x * r, p.y * eps, p.z * r, p.s * r)


def blow_down_noise(sigma_bar: float, eps: float) -> float:
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    return eps ** 0.75 * sigma_bar


def benoit_canard(s, branch: CanardBranch, mu: float) -> PhasePoint:
    """Polynomial canard of the blown-up normal form, parametrized by time."""
    lam = CanardBranch(branch).eigenvalue(mu)
    s = np.asarray(s, dtype=float)
    return PhasePoint(lam * s / 2, lam * lam * s * s / 4 + lam / 2, mu * s / 2, s)


def weak_canard_z(z, mu: float) -> tuple:
    """Weak canard (x, y) as a function of z."""
    z = np.asarray(z, dtype=float)
    return -z, z * z - mu / 2


def strong_canard_z(z, mu: float) -> tuple:
    """Strong canard (x, y) as a function of z."""
    z = np.asarray(z, dtype=float)
    x = -z / mu
    return x, x * x - 0.5


def desingularized_slow_flow(x, z, mu: float) -> np.ndarray:
    return np.array([-(mu + 1.0) * x - z, mu * x])


def slow_flow_jacobian(mu: float) -> np.ndarray:
    return np.array([[-(mu + 1.0), -1.0], [mu, 0.0]])


def omega(z, mu: float):
    """Rotation frequency sqrt(1 - z^2 + mu) of the linearization about the weak canard."""
    arg = 1.0 - np.square(z) + mu
    if np.any(arg <= 0.0):
        raise DomainError(f"omega undefined for |z| >= sqrt(1+mu) (mu={mu})")
    return np.sqrt(arg)


def reflect(p):
    """The time-reversing symmetry (x, y, z) -> (-x, y, -z) of the normal form."""
    p = np.asarray(p, dtype=float)
    return np.stack([-p[0], p[1], -p[2]] + list(p[3:]))
