"""Slow-manifold slices, maximal canards and their twisting.

Everything here works in the blown-up frame of the normal form.  Seeds are
placed on the attracting branch x = +sqrt(y) of the critical manifold at
z = -1 and parametrized by their x coordinate; the repelling branch is the
mirror image under (x, y, z, s) -> (-x, y, -z, -s).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .covariance import leading_frame
from .model import Frame, SystemParams, drift_normal_form, reflect
from .odeint import IntegratorConfig, SectionEvent, integrate

Z_SEED = -1.0
DEFAULT_TOL = 1e-9
SLICE_CONFIG = IntegratorConfig(abs_tol=1e-12, rel_tol=1e-12, max_step=0.1)

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class SectionSpec:
    """Hyperplane ``kind = value`` with kind one of "x", "y", "z".

    ``direction`` selects upward (+1), downward (-1) or any (0) crossings for
    x- and y-sections; z-sections are always crossed upward.
    """
    kind: str
    value: float
    direction: int = 0

    def __post_init__(self):
        if self.kind not in _AXES:
            raise ValueError(f"section kind must be x, y or z, got {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError("section value must be finite")
        if self.direction not in (-1, 0, 1):
            raise ValueError("direction must be -1, 0 or 1")

    @property
    def axis(self) -> int:
        return _AXES[self.kind]

    @property
    def plane_axes(self) -> tuple:
        """Indices of the two coordinates that parametrize the section."""
        return tuple(i for i in range(3) if i != self.axis)

    def reflected(self) -> "SectionSpec":
        if self.kind == "y":
            return SectionSpec("y", self.value, -self.direction)
        return SectionSpec(self.kind, -self.value, self.direction)


SIGMA_0 = SectionSpec("z", 0.0)


@dataclass
class ManifoldSlice:
    """Intersection of a slow manifold with a section, ordered by seed."""
    section: SectionSpec
    seeds: np.ndarray
    points: np.ndarray  # shape (n, 3)
    seed_map: Callable = field(repr=False)
    mu: float = float("nan")
    dropped: np.ndarray = field(default_factory=lambda: np.empty(0))
    kind: str = "attracting"

    def planar(self) -> np.ndarray:
        return self.points[:, list(self.section.plane_axes)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "x", "y", "z"])
            for a, p in zip(self.seeds, self.points):
                w.writerow([repr(float(a))] + [repr(float(c)) for c in p])


def default_seeds(mu: float, n: int = 400) -> np.ndarray:
    """Log-spaced seed abscissae in the funnel between the fold and the strong canard."""
    if n < 1:
        raise ValueError("need at least one seed")
    if n == 1:
        return np.array([1.0])
    return np.exp(np.linspace(0.0, np.log(1.0 / mu), n))


def _check_params(params: SystemParams):
    if params.frame is not Frame.BLOWN_UP:
        raise ValueError("slices are computed in the blown-up frame")


def _seed_states(seeds) -> np.ndarray:
    a = np.asarray(seeds, dtype=float)
    return np.stack([a, a * a, np.full_like(a, Z_SEED)])


def _forward_to_section(params, section, seeds, config):
    """Integrate seeds forward to the section; returns (points, ok-mask)."""
    seeds = np.atleast_1d(np.asarray(seeds, dtype=float))
    mu = params.mu

    def f(s, y):
        return drift_normal_form(y, params)

    p0 = _seed_states(seeds)
    if section.kind == "z":
        # z advances at the constant rate mu/2, so the hitting time is explicit
        t_hit = 2.0 * (section.value - Z_SEED) / mu
        if t_hit < 0:
            raise ValueError("z-section lies before the seeding plane")
        end = integrate(f, p0, (0.0, t_hit), config, store=False).end
        end[2] = section.value
        ok = np.all(np.isfinite(end), axis=0)
        return end.T, ok
    # x/y sections: first crossing before z = 0; beyond it forward
    # integration leaves along the repelling sheet and blows up
    ev = SectionEvent(section.axis, section.value, section.direction)
    horizon = 2.0 * (0.0 - Z_SEED) / mu
    pts = np.full((len(seeds), 3), np.nan)
    tr = integrate(f, p0, (0.0, horizon), config, events=[ev], store=False)
    seen = set()
    for c in sorted(tr.crossings, key=lambda c: c.s):
        m = c.member[0]
        if m not in seen:
            seen.add(m)
            pts[m] = c.state
    ok = np.all(np.isfinite(pts), axis=1)
    return pts, ok


def attracting_slice(params: SystemParams, section: SectionSpec = SIGMA_0,
                     seed_grid: Sequence[float] | None = None,
                     config: IntegratorConfig = SLICE_CONFIG) -> ManifoldSlice:
    """Trace the attracting slow manifold to ``section`` by forward integration."""
    _check_params(params)
    seeds = default_seeds(params.mu) if seed_grid is None else np.asarray(seed_grid, float)
    seeds = np.atleast_1d(seeds)
    if np.any(seeds <= 0) or np.any(np.diff(seeds) <= 0):
        raise ValueError("seeds must be positive and strictly increasing")
    pts, ok = _forward_to_section(params, section, seeds, config)

    def seed_map(a: float) -> np.ndarray:
        p, good = _forward_to_section(params, section, [a], config)
        if not good[0]:
            raise ValueError(f"seed {a} does not reach the section")
        return p[0]

    return ManifoldSlice(section, seeds[ok], pts[ok], seed_map, params.mu, seeds[~ok])


def repelling_slice(params: SystemParams, section: SectionSpec = SIGMA_0,
                    seed_grid: Sequence[float] | None = None,
                    config: IntegratorConfig = SLICE_CONFIG,
                    method: str = "symmetry") -> ManifoldSlice:
    """Trace the repelling slow manifold to ``section``.

    Seeds sit on x = -sqrt(y) at z = +1 (parametrized by |x|).  The default
    maps the problem through the reflection and reuses the attracting
    computation; ``method="backward"`` integrates the time-reversed field
    directly and serves as an independent check.
    """
    _check_params(params)
    seeds = default_seeds(params.mu) if seed_grid is None else np.asarray(seed_grid, float)
    seeds = np.atleast_1d(seeds)
    if method == "symmetry":
        att = attracting_slice(params, section.reflected(), seeds, config)
        pts = reflect(att.points.T).T

        def seed_map(a: float) -> np.ndarray:
            return reflect(att.seed_map(a))

        return ManifoldSlice(section, att.seeds, pts, seed_map, params.mu,
                             att.dropped, kind="repelling")
    if method != "backward":
        raise ValueError(f"unknown method {method!r}")
    if section.kind != "z":
        raise ValueError("backward slices are implemented for z-sections")
    mu = params.mu

    def f(s, y):
        return drift_normal_form(y, params)

    def run(a):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        p0 = np.stack([-a, a * a, np.full_like(a, -Z_SEED)])
        t_hit = 2.0 * (-Z_SEED - section.value) / mu
        end = integrate(f, p0, (0.0, -t_hit), config, store=False).end
        end[2] = section.value
        return end.T

    pts = run(seeds)
    ok = np.all(np.isfinite(pts), axis=1)
    return ManifoldSlice(section, seeds[ok], pts[ok], lambda a: run(a)[0],
                         params.mu, seeds[~ok], kind="repelling")


# --- maximal canards ------------------------------------------------------

class DegenerateSlices(ValueError):
    """The two slices coincide, so their intersection is not a set of points."""


@dataclass
class CanardRecord:
    k: int
    point: np.ndarray
    dist_weak: float
    twists: int | None
    seed_att: float
    seed_rep: float
    status: str = "resolved"  # resolved | unresolved | ambiguous


def _segment_crossings(P: np.ndarray, R: np.ndarray) -> list:
    """All (i, j, u, v) with P[i] + u (P[i+1]-P[i]) = R[j] + v (R[j+1]-R[j]), u, v in [0, 1)."""
    p0, dp = P[:-1, None, :], np.diff(P, axis=0)[:, None, :]
    r0, dr = R[None, :-1, :], np.diff(R, axis=0)[None, :, :]
    den = dp[..., 0] * dr[..., 1] - dp[..., 1] * dr[..., 0]
    w = r0 - p0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (w[..., 0] * dr[..., 1] - w[..., 1] * dr[..., 0]) / den
        v = (w[..., 0] * dp[..., 1] - w[..., 1] * dp[..., 0]) / den
    hit = (den != 0) & (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    return [(i, j, u[i, j], v[i, j]) for i, j in zip(*np.nonzero(hit))]


def _refine(att, rep, a, b, tol, max_iter=60):
    """Newton iteration on the seed pair for att(a) = rep(b) in section coordinates."""
    ax = list(att.section.plane_axes)

    def F(a, b):
        return att.seed_map(a)[ax] - rep.seed_map(b)[ax]

    lo_a, hi_a = att.seeds[0], att.seeds[-1]
    lo_b, hi_b = rep.seeds[0], rep.seeds[-1]
    r = F(a, b)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            return a, b, r, True
        da = max(1e-7 * abs(a), 1e-9)
        db = max(1e-7 * abs(b), 1e-9)
        J = np.column_stack([(F(a + da, b) - r) / da, (F(a, b + db) - r) / db])
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return a, b, r, False
        lam = 1.0
        while lam > 1e-4:
            na = float(np.clip(a + lam * step[0], lo_a, hi_a))
            nb = float(np.clip(b + lam * step[1], lo_b, hi_b))
            nr = F(na, nb)
            if np.max(np.abs(nr)) < np.max(np.abs(r)):
                break
            lam *= 0.5
        else:
            return a, b, r, False
        a, b, r = na, nb, nr
    return a, b, r, bool(np.max(np.abs(r)) < tol)


def weak_point(section: SectionSpec, mu: float) -> np.ndarray:
    """Point where the weak canard meets a z-section."""
    if section.kind != "z":
        raise ValueError("the weak-canard reference is defined on z-sections")
    z = section.value
    return np.array([-z, z * z - mu / 2, z])


def find_maximal_canards(att: ManifoldSlice, rep: ManifoldSlice,
                         tol: float = DEFAULT_TOL) -> list:
    """Intersect an attracting and a repelling slice on a common z-section.

    Candidates are the crossings of the two polylines; each is refined by
    Newton iteration on the two seeding parameters until the points agree to
    ``tol``.  Records are indexed by decreasing distance to the weak canard,
    so k = 0 is the strong primary canard.  Intersections closer to the weak
    canard than 10 tol are marked unresolved; failed refinements are kept and
    marked ambiguous.
    """
    if att.section != rep.section:
        raise ValueError("slices lie on different sections")
    if att.section.kind != "z":
        raise ValueError("maximal canards are located on z-sections")
    P, R = att.planar(), rep.planar()
    if P.shape == R.shape and np.allclose(P, R, rtol=0, atol=tol):
        raise DegenerateSlices("identical slices have no isolated intersections")
    if len(P) < 2 or len(R) < 2:
        return []
    w = weak_point(att.section, att.mu)
    found = []
    for i, j, u, v in _segment_crossings(P, R):
        a0 = att.seeds[i] + u * (att.seeds[i + 1] - att.seeds[i])
        b0 = rep.seeds[j] + v * (rep.seeds[j + 1] - rep.seeds[j])
        a, b, res, ok = _refine(att, rep, a0, b0, tol)
        pt = 0.5 * (att.seed_map(a) + rep.seed_map(b))
        d = float(np.hypot(pt[0] - w[0], pt[1] - w[1]))
        status = "resolved" if ok else "ambiguous"
        if d < 10 * tol:
            status = "unresolved"
        found.append((a, b, pt, d, status))
    # merge duplicates produced by neighbouring segment pairs
    found.sort(key=lambda t: -t[3])
    merged = []
    for item in found:
        if merged and abs(merged[-1][0] - item[0]) < 1e3 * tol * max(1, item[0]) \
                and abs(merged[-1][1] - item[1]) < 1e3 * tol * max(1, item[1]):
            continue
        merged.append(item)
    out = []
    for k, (a, b, pt, d, status) in enumerate(merged):
        out.append(CanardRecord(k, pt, d, None, float(a), float(b), status))
    return out


def canard_trajectory(seed: float, params: SystemParams, n: int = 4001,
                      config: IntegratorConfig = SLICE_CONFIG) -> np.ndarray:
    """Samples (s, x, y, z) of the orbit through a seed, from z = -1 to z = +1.

    The half beyond z = 0 is the mirror image of the first half, which is
    exact for a maximal canard crossing z = 0 on the symmetry line x = 0.
    """
    mu = params.mu

    def f(s, y):
        return drift_normal_form(y, params)

    t_half = 2.0 * (0.0 - Z_SEED) / mu
    tr = integrate(f, _seed_states([seed])[:, 0], (0.0, t_half), config)
    s = np.linspace(0.0, t_half, n)
    st = tr(s)
    back = st[::-1][1:].copy()
    back[:, 0] *= -1
    back[:, 2] *= -1
    s_all = np.concatenate([s, 2 * t_half - s[::-1][1:]])
    return np.column_stack([s_all, np.vstack([st, back])])


class TwistError(ValueError):
    pass


def rotation_angle(states: np.ndarray, mu: float) -> np.ndarray:
    """Unwrapped angle of the deviation from the weak canard in the rotation frame.

    ``states`` has rows (x, y, z).  Raises TwistError if consecutive samples
    turn by more than pi/2 (under-resolved) or the deviation vanishes.
    """
    x, y, z = states[:, 0], states[:, 1], states[:, 2]
    u = np.stack([x + z, y - (z * z - mu / 2)])
    if np.max(np.hypot(u[0], u[1])) < 1e-14:
        raise TwistError("trajectory coincides with the weak canard")
    t = np.empty_like(u)
    for i, zz in enumerate(z):
        t[:, i] = np.linalg.solve(leading_frame(zz, mu), u[:, i])
    theta = np.unwrap(np.arctan2(t[1], t[0]))
    if len(theta) > 1 and np.max(np.abs(np.diff(theta))) > np.pi / 2:
        raise TwistError("angle increments exceed pi/2; resample more finely")
    return theta


def twist_count(states: np.ndarray, mu: float) -> int:
    """Half-rotations of a trajectory around the weak canard.

    Counts sign changes of the fast deviation x - x_weak = x + z along the
    trajectory; each is one half turn of the rotation.  The frame angle is
    computed alongside to reject under-resolved input.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] < 3 or len(states) < 3:
        raise TwistError("trajectory too short")
    if states.shape[1] == 4:  # (s, x, y, z) rows
        states = states[:, 1:]
    z = states[:, 2]
    if not (z.min() < 0 < z.max()):
        raise TwistError("trajectory must span the fold at z = 0")
    rotation_angle(states, mu)
    xi = states[:, 0] + z
    sgn = np.sign(xi)
    sgn = sgn[sgn != 0]
    return int(np.count_nonzero(sgn[1:] != sgn[:-1]))


def assign_twists(records: list, params: SystemParams, n: int = 4001) -> list:
    for rec in records:
        if rec.status == "unresolved":
            continue
        try:
            rec.twists = twist_count(canard_trajectory(rec.seed_att, params, n)[:, 1:],
                                     params.mu)
        except TwistError:
            rec.twists = None
    return records


def hunt(params: SystemParams, n_seeds: int = 400, tol: float = DEFAULT_TOL,
         config: IntegratorConfig = SLICE_CONFIG, twists: bool = True) -> tuple:
    """Attracting and repelling slices on z = 0 plus the maximal canards."""
    seeds = default_seeds(params.mu, n_seeds)
    att = attracting_slice(params, SIGMA_0, seeds, config)
    rep = repelling_slice(params, SIGMA_0, seeds, config)
    recs = find_maximal_canards(att, rep, tol)
    if twists:
        assign_twists(recs, params)
    return att, rep, recs


# --- spacing --------------------------------------------------------------

@dataclass
class SpacingReport:
    k: np.ndarray
    dist_weak: np.ndarray
    c0: float | None
    intercept: float | None
    z_cross: np.ndarray = field(default_factory=lambda: np.empty(0))
    z_separation: np.ndarray = field(default_factory=lambda: np.empty(0))
    sep_over_sqrt_eps: np.ndarray = field(default_factory=lambda: np.empty(0))


def fit_c0(k, dist, mu: float) -> tuple:
    """Least-squares slope of log dist against (2k+1)^2 mu; returns (c0, intercept)."""
    k = np.asarray(k, dtype=float)
    X = (2 * k + 1) ** 2 * mu
    slope, intercept = np.polyfit(X, np.log(dist), 1)
    return float(-slope), float(intercept)


def canard_spacing(records: list, params: SystemParams,
                   section: SectionSpec = SIGMA_0,
                   config: IntegratorConfig = SLICE_CONFIG) -> SpacingReport:
    """Distances of the secondary canards and their spacing on a section.

    On z = 0 the secondary canards (k >= 1) give the fit of log dist_weak
    against -c0 (2k+1)^2 mu; the strong canard is excluded because its
    distance is set by the funnel boundary rather than by the rotation.  On a
    y-section the canards are re-integrated to their first crossing and the
    z-separations are reported in original units together with their ratio
    to sqrt(eps).
    """
    good = [r for r in records if r.status == "resolved"]
    if len(good) < 2:
        raise ValueError("need at least two resolved canards")
    k = np.array([r.k for r in good])
    d = np.array([r.dist_weak for r in good])
    if section.kind == "z":
        sec = k >= 1
        c0 = icpt = None
        if np.count_nonzero(sec) >= 2:
            c0, icpt = fit_c0(k[sec], d[sec], params.mu)
        return SpacingReport(k, d, c0, icpt)
    pts, ok = _forward_to_section(params, section, [r.seed_att for r in good], config)
    if not np.all(ok):
        raise ValueError("some canards do not reach the section")
    zc = pts[:, 2]
    sep = np.abs(np.diff(zc))
    r = np.sqrt(params.eps)
    return SpacingReport(k, d, None, None, zc, sep * r, sep)


def records_to_csv(records: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "x", "y", "z", "dist_weak", "twists", "seed", "status"])
        for r in records:
            w.writerow([r.k] + [repr(float(c)) for c in r.point]
                       + [repr(r.dist_weak), "" if r.twists is None else r.twists,
                          repr(r.seed_att), r.status])


def summary(records: list, params: SystemParams, spacing: SpacingReport | None = None) -> dict:
    secondary = [r for r in records if r.k >= 1 and r.status == "resolved"]
    out = {
        "mu": params.mu, "eps": params.eps,
        "k_detected": len(secondary),
        "canards": [{"k": r.k, "dist_weak": r.dist_weak, "twists": r.twists,
                     "seed": r.seed_att, "status": r.status} for r in records],
    }
    if spacing is not None and spacing.c0 is not None:
        out["c0"] = spacing.c0
    return out


def write_summary(records, params, path, spacing=None) -> None:
    with open(path, "w") as fh:
        json.dump(summary(records, params, spacing), fh, indent=2)
