"""Post-processing: noise thresholds, regime maps, oscillation counts, fits and densities."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.ndimage import maximum_filter

from .covariance import leading_frame
from .model import GlobalReturnParams


class InsufficientData(ValueError):
    pass


# --- noise thresholds and regime map ---------------------------------------

def sigma_k(mu, k, c0: float = 1.0):
    """Noise level above which the k-th canard's oscillations drown in the fluctuations."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0) or np.any(mu >= 1):
        raise ValueError("mu must lie in (0, 1)")
    if np.any(np.asarray(k) < 0) or c0 <= 0:
        raise ValueError("need k >= 0 and c0 > 0")
    return mu ** 0.25 * np.exp(-c0 * (2 * np.asarray(k) + 1) ** 2 * mu)


def max_canard_index(mu: float) -> int:
    """Largest k with 2k+1 < 1/mu (-1 if none)."""
    return int(np.ceil((1.0 / mu - 1.0) / 2.0)) - 1


def visible_count(mu: float, sigma: float, c0: float = 1.0) -> int:
    """#{k : sigma <= sigma_k(mu) and 2k+1 < 1/mu}."""
    kmax = max_canard_index(mu)
    if kmax < 0:
        return 0
    ks = np.arange(kmax + 1)
    return int(np.count_nonzero(sigma <= sigma_k(mu, ks, c0)))


@dataclass
class RegimeMap:
    mu: np.ndarray
    sigma: np.ndarray
    counts: np.ndarray  # (len(mu), len(sigma))
    c0: float
    boundaries: dict = field(default_factory=dict)  # k -> sigma_k over mu

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu", "sigma", "count"])
            for i, m in enumerate(self.mu):
                for j, s in enumerate(self.sigma):
                    w.writerow([repr(float(m)), repr(float(s)), int(self.counts[i, j])])

    def to_matrix(self, path) -> None:
        """gnuplot 'matrix nonuniform' layout: first row sigma, first column mu."""
        with open(path, "w") as fh:
            fh.write(" ".join([str(len(self.sigma))] + [repr(float(s)) for s in self.sigma]) + "\n")
            for m, row in zip(self.mu, self.counts):
                fh.write(" ".join([repr(float(m))] + [str(int(c)) for c in row]) + "\n")

    def boundaries_to_csv(self, path) -> None:
        ks = sorted(self.boundaries)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu"] + [f"sigma_{k}" for k in ks])
            for i, m in enumerate(self.mu):
                w.writerow([repr(float(m))] + [repr(float(self.boundaries[k][i])) for k in ks])


def regime_map(mu_values, sigma_values, c0: float = 1.0, k_curves: int = 6) -> RegimeMap:
    mu = np.asarray(mu_values, dtype=float)
    sig = np.asarray(sigma_values, dtype=float)
    if mu.ndim != 1 or sig.ndim != 1 or len(mu) == 0 or len(sig) == 0:
        raise ValueError("mu and sigma grids must be non-empty vectors")
    if np.any(sig < 0):
        raise ValueError("noise levels must be non-negative")
    counts = np.array([[visible_count(m, s, c0) for s in sig] for m in mu], dtype=int)
    bounds = {k: sigma_k(mu, k, c0) for k in range(k_curves)}
    return RegimeMap(mu, sig, counts, c0, bounds)


# --- oscillation counting ---------------------------------------------------

def sao_gate(mu: float, sigma: float) -> float:
    """Visibility threshold 3 sigma mu^(-1/4) for oscillations near the fold."""
    return 3.0 * sigma * mu ** -0.25


def canonical_coordinates(states: np.ndarray, mu: float) -> np.ndarray:
    """Deviation from the weak canard expressed in the rotation frame, shape (n, 2)."""
    x, y, z = states[:, 0], states[:, 1], states[:, 2]
    u = np.stack([x + z, y - (z * z - mu / 2)], axis=1)
    out = np.empty_like(u)
    for i, zz in enumerate(z):
        out[i] = np.linalg.solve(leading_frame(zz, mu), u[i])
    return out


def count_saos(states: np.ndarray, mu: float, sigma: float = 0.0,
               z_window: float = 0.95) -> int:
    """Half-rotations around the weak canard that rise above the noise floor.

    ``states`` are blown-up (x, y, z) rows.  The fast deviation xi = x + z is
    passed through a Schmitt trigger with thresholds +-gate, gate =
    3 sigma mu^(-1/4); every switch between the two states is one visible
    half-rotation.  Only samples with |z| < z_window are used, and the
    rotation-frame coordinates must exist there.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != 3:
        raise ValueError("states must have rows (x, y, z)")
    sel = np.abs(states[:, 2]) < z_window
    if np.count_nonzero(sel) < 3:
        raise InsufficientData("path too short in the fold region")
    st = states[sel]
    canonical_coordinates(st[[0, -1]], mu)  # domain check of the frame
    xi = st[:, 0] + st[:, 2]
    gate = sao_gate(mu, sigma)
    state = 0
    count = 0
    for v in xi:
        if v > gate:
            new = 1
        elif v < -gate:
            new = -1
        else:
            continue
        if state != 0 and new != state:
            count += 1
        state = new
    return count


@dataclass
class MmoPattern:
    segments: list  # [(L, s), ...]

    @property
    def lao_counts(self) -> list:
        return [L for L, _ in self.segments]

    def symbol(self) -> str:
        return " ".join(f"{L}^{s}" for L, s in self.segments)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "L", "s"])
            for i, (L, s) in enumerate(self.segments):
                w.writerow([i, L, s])


LOWER_FOLD = -2.0 / 3.0
UPPER_FOLD = 0.0


def classify_mmo(states: np.ndarray, params: GlobalReturnParams,
                 sigma: float | None = None) -> MmoPattern:
    """MMO pattern of an original-frame trajectory of the cubic global-return model.

    A large oscillation is a visit below the lower fold x = -2/3 followed by
    a return across the upper fold x = 0.  A return that lands with z < 0
    enters the folded-node funnel and closes the current segment; its small
    oscillations are counted by ``count_saos`` (in blown-up units, gated by
    ``sigma``, default the model's noise level) up to the next descent below
    the lower fold.  Incomplete leading and trailing segments are discarded.
    """
    states = np.asarray(states, dtype=float)
    sp = params.system
    sigma = sp.sigma if sigma is None else sigma
    x, z = states[:, 0], states[:, 2]
    finite = np.all(np.isfinite(states), axis=1)
    if not np.all(finite):
        stop = int(np.argmin(finite))
        states, x, z = states[:stop], x[:stop], z[:stop]
    below = x < LOWER_FOLD
    returns = []  # (index of landing, landed in funnel)
    armed = False
    for i in range(1, len(x)):
        if below[i]:
            armed = True
        elif armed and x[i - 1] <= UPPER_FOLD < x[i]:
            returns.append((i, z[i] < 0))
            armed = False
    if not returns:
        return MmoPattern([])
    r = np.sqrt(sp.eps)
    sigma_bar = sigma * sp.eps ** -0.75
    segments = []
    L = 0
    opened = False
    for i, funnel in returns:
        L += 1
        if not funnel:
            continue
        if opened:
            # passage runs from the landing to the next descent below the fold
            nxt = np.nonzero(below[i:])[0]
            if len(nxt) == 0:
                break
            seg = states[i:i + nxt[0]]
            bu = np.column_stack([seg[:, 0] / r, seg[:, 1] / sp.eps, seg[:, 2] / r])
            try:
                s_count = count_saos(bu, sp.mu, sigma_bar)
            except InsufficientData:
                s_count = 0
            segments.append((L, s_count))
        opened = True
        L = 0
    return MmoPattern(segments)


# --- survival and fits ------------------------------------------------------

def km_survival(times, censored) -> tuple:
    """Kaplan-Meier estimate; returns (event times, survival just after each)."""
    t = np.asarray(times, dtype=float)
    c = np.asarray(censored, dtype=bool)
    order = np.lexsort((c, t))  # events before censorings at equal times
    t, c = t[order], c[order]
    n = len(t)
    at_risk = n - np.arange(n)
    ev_t, surv = [], []
    S = 1.0
    i = 0
    while i < n:
        j = i
        d = 0
        while j < n and t[j] == t[i]:
            d += not c[j]
            j += 1
        if d:
            S *= 1.0 - d / at_risk[i]
            ev_t.append(t[i])
            surv.append(S)
        i = j
    return np.array(ev_t), np.array(surv)


@dataclass
class ExitFit:
    kappa: float
    r2: float
    n_exits: int
    x: np.ndarray
    log_s: np.ndarray


def escape_variable(z, mu: float, sigma: float):
    """(z^2 - mu) / (mu |log sigma|)."""
    return (np.square(z) - mu) / (mu * abs(np.log(sigma)))


def exit_scaling_fit(exits, mu: float, sigma: float, min_exits: int = 200,
                     burn_in: float = 0.1, min_at_risk: int = 10) -> ExitFit:
    """Fit log P{exit z > z} against (z^2 - mu)/(mu |log sigma|).

    Survival is the Kaplan-Meier estimate in the exit coordinate z, with
    censored paths entering at their censoring level.  The first ``burn_in``
    fraction of the exit range is excluded, as are tail points with fewer
    than ``min_at_risk`` paths still at risk.
    """
    if exits.n_exits < min_exits:
        raise InsufficientData(f"{exits.n_exits} exits, need {min_exits}")
    cz = exits.censored
    zs = exits.location[:, 2]
    X = escape_variable(zs, mu, sigma)
    t, S = km_survival(X, cz)
    # at-risk count just before each event time
    at_risk = np.array([np.count_nonzero(X >= ti) for ti in t])
    lo = t.min() + burn_in * (t.max() - t.min())
    keep = (t >= lo) & (at_risk >= min_at_risk) & (S > 0)
    if np.count_nonzero(keep) < 3:
        raise InsufficientData("too few tail points")
    res = stats.linregress(t[keep], np.log(S[keep]))
    return ExitFit(-res.slope, res.rvalue ** 2, exits.n_exits, t[keep], np.log(S[keep]))


@dataclass
class TubeExitFit:
    kappa0: float | None
    ci: tuple | None
    r2: float | None
    lower_bound: float | None = None


def tube_exit_exponent_fit(r_over_sigma, probabilities, n_paths: int | None = None,
                           level: float = 0.95, corrected: bool = True) -> TubeExitFit:
    """Decay rate kappa0 of the tube-exit probability in r^2 / (2 sigma^2), with a confidence interval.

    With ``corrected`` the fitted quantity is log(-log(1 - P)): if paths leave
    at a rate proportional to exp(-kappa0 r^2 / 2 sigma^2) then -log(1 - P)
    is that rate integrated over the passage, so the fit is not flattened
    when small radii saturate at P = 1.  The uncorrected fit uses log P.
    Points at P = 0 (and P = 1 when corrected) carry no slope information.
    With fewer than four usable points no fit is made; if ``n_paths`` is
    known, the largest-r zero count still gives the lower bound
    kappa0 >= log(n_paths) / (r^2 / 2 sigma^2).
    """
    q = np.asarray(r_over_sigma, dtype=float)
    p = np.asarray(probabilities, dtype=float)
    if q.shape != p.shape:
        raise ValueError("r/sigma and probabilities must match")
    X = q * q / 2
    zero = p <= 0
    ok = ~zero & (p < 1 if corrected else True)
    lower = None
    if np.any(zero) and n_paths:
        lower = float(np.log(n_paths) / X[zero].min())
    if np.count_nonzero(ok) < 4 or len(np.unique(X[ok])) < 4:
        if lower is None and not np.any(zero):
            raise InsufficientData("need at least four distinct usable r/sigma values")
        return TubeExitFit(None, None, None, lower)
    yv = np.log(-np.log1p(-p[ok])) if corrected else np.log(p[ok])
    res = stats.linregress(X[ok], yv)
    tq = stats.t.ppf(0.5 + level / 2, np.count_nonzero(ok) - 2)
    k0 = -res.slope
    return TubeExitFit(float(k0), (float(k0 - tq * res.stderr), float(k0 + tq * res.stderr)),
                       float(res.rvalue ** 2), lower)


# --- escape density ---------------------------------------------------------

@dataclass
class EscapeDensity:
    hist: np.ndarray  # (ny, nz) probability mass per bin
    y_edges: np.ndarray
    z_edges: np.ndarray
    bandwidth: float
    modes: list  # [(y, z, height relative to peak)]
    reference: tuple | None = None
    n_hits: int = 0

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def to_csv(self, path) -> None:
        yc = 0.5 * (self.y_edges[1:] + self.y_edges[:-1])
        zc = 0.5 * (self.z_edges[1:] + self.z_edges[:-1])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "z", "mass"])
            for i, y in enumerate(yc):
                for j, z in enumerate(zc):
                    w.writerow([repr(float(y)), repr(float(z)), repr(float(self.hist[i, j]))])

    def summary(self) -> dict:
        return {"n_hits": self.n_hits, "bandwidth": self.bandwidth,
                "n_modes": self.n_modes,
                "modes": [list(map(float, m)) for m in self.modes],
                "reference": None if self.reference is None else list(map(float, self.reference))}

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _grid_modes(D, gy, gz, rel):
    peak = D.max()
    is_max = (D == maximum_filter(D, size=3, mode="nearest")) & (D >= rel * peak)
    out = [(gy[i], gz[j], D[i, j] / peak) for i, j in np.argwhere(is_max)]
    out.sort(key=lambda m: -m[2])
    return out


def escape_density(hits, bins: int = 60, grid: int = 160, min_hits: int = 500,
                   rel_height: float = 0.1, reference=None) -> EscapeDensity:
    """Normalized (y, z) histogram of section hits and KDE modes.

    Modes are local maxima of a Gaussian KDE with Silverman's bandwidth,
    evaluated on a grid, that reach ``rel_height`` of the global peak.
    """
    H = np.asarray(hits, dtype=float)
    if H.ndim != 2 or H.shape[1] != 2:
        raise ValueError("hits must have columns (y, z)")
    if len(H) < min_hits:
        raise InsufficientData(f"{len(H)} hits, need {min_hits}")
    y, z = H[:, 0], H[:, 1]
    span = np.ptp(H, axis=0)
    scale = max(np.abs(H).max(), 1.0)
    if np.all(span <= 1e-12 * scale):
        # all hits coincide: a point mass
        e = 1e-9 * scale
        hist = np.zeros((1, 1)) + 1.0
        return EscapeDensity(hist, np.array([y[0] - e, y[0] + e]),
                             np.array([z[0] - e, z[0] + e]), 0.0,
                             [(float(y.mean()), float(z.mean()), 1.0)], reference, len(H))
    counts, ye, ze = np.histogram2d(y, z, bins=bins)
    hist = counts / counts.sum()
    cov = np.cov(H.T)
    if np.linalg.matrix_rank(cov, tol=1e-14 * np.trace(cov)) < 2:
        # hits on a line: smooth along the principal axis only
        w, v = np.linalg.eigh(cov)
        axis = v[:, -1]
        proj = (H - H.mean(axis=0)) @ axis
        kde = stats.gaussian_kde(proj, bw_method="silverman")
        g = np.linspace(proj.min(), proj.max(), grid)
        d = kde(g)
        peak = d.max()
        modes = []
        for i in range(len(g)):
            left = d[i - 1] if i > 0 else -np.inf
            right = d[i + 1] if i < len(g) - 1 else -np.inf
            if d[i] >= left and d[i] >= right and d[i] >= rel_height * peak:
                p = H.mean(axis=0) + g[i] * axis
                modes.append((p[0], p[1], d[i] / peak))
        return EscapeDensity(hist, ye, ze, float(kde.factor), modes, reference, len(H))
    kde = stats.gaussian_kde(H.T, bw_method="silverman")
    gy = np.linspace(y.min(), y.max(), grid)
    gz = np.linspace(z.min(), z.max(), grid)
    GY, GZ = np.meshgrid(gy, gz, indexing="ij")
    D = kde(np.vstack([GY.ravel(), GZ.ravel()])).reshape(GY.shape)
    return EscapeDensity(hist, ye, ze, float(kde.factor), _grid_modes(D, gy, gz, rel_height),
                         reference, len(H))
