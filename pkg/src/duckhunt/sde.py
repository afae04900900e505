"""Euler-Maruyama Monte Carlo with reproducible per-path noise streams.

Paths are advanced together as columns of a (3, n) state array.  Every path
draws its Gaussian increments from its own Philox stream keyed by
(master_seed, path_index), so a path's realization never depends on which
other paths share its batch or on how batches are scheduled over workers.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .canard import SectionSpec
from .covariance import EscapeSetSpec, TubeSpec
from .model import (Frame, GlobalReturnParams, SystemParams, diffusion_matrix,
                    drift_global_return, drift_normal_form)

CHUNK = 1024  # steps of noise drawn per stream refill
BLOCK = 1024  # paths per vectorized block


class StopReason(str, enum.Enum):
    TUBE_EXIT = "tube-exit"
    ESCAPE_EXIT = "escape-set-exit"
    SECTION_HIT = "section-hit"
    Z_LIMIT = "z-limit"
    TIME_LIMIT = "time-limit"
    NON_FINITE = "non-finite"


EXIT_REASONS = frozenset({StopReason.TUBE_EXIT, StopReason.ESCAPE_EXIT,
                          StopReason.SECTION_HIT})


@dataclass(frozen=True)
class SdeConfig:
    h: float
    n_paths: int = 1
    master_seed: int = 0
    scheme: str = "euler-maruyama"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.scheme != "euler-maruyama":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


def default_step(params: SystemParams) -> float:
    """min(1e-3, mu/100) in blown-up time, rescaled by sqrt(eps) in the original frame."""
    h = min(1e-3, params.mu / 100)
    if params.frame is Frame.ORIGINAL:
        h *= np.sqrt(params.eps)
    return h


@dataclass(frozen=True)
class SdeModel:
    """Drift acting on (3, n) states and constant diagonal noise on (x, y)."""
    drift: Callable
    noise: np.ndarray  # (2,) diagonal of the diffusion matrix
    name: str
    params: object

    @property
    def deterministic(self) -> bool:
        return not np.any(self.noise)


def normal_form_model(params: SystemParams) -> SdeModel:
    return SdeModel(lambda u: drift_normal_form(u, params),
                    np.diag(diffusion_matrix(params)).copy(),
                    f"normal-form-{params.frame.value}", params)


def global_return_model(params: GlobalReturnParams) -> SdeModel:
    sp = params.system
    if sp.frame is not Frame.ORIGINAL:
        raise ValueError("the global-return model is posed in the original frame")
    return SdeModel(lambda u: drift_global_return(u, params),
                    np.diag(diffusion_matrix(sp)).copy(), "global-return", params)


class RngStream:
    """Counter-based normal stream for one path.

    The Philox key is (master_seed, path_index); increments for step k are
    the normals at positions 2k and 2k+1 of the stream, drawn in fixed
    chunks of CHUNK steps.
    """

    def __init__(self, master_seed: int, path_index: int):
        self.master_seed = int(master_seed)
        self.path_index = int(path_index)
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.master_seed, self.path_index]))
        self.counter = 0

    def next_chunk(self) -> np.ndarray:
        """Standard normals for the next CHUNK steps, shape (CHUNK, 2)."""
        self.counter += CHUNK
        return self._gen.standard_normal((CHUNK, 2))


def em_step(state: np.ndarray, drift: Callable, noise: np.ndarray, h: float,
            dW: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step; ``dW`` holds N(0, h) increments for (x, y)."""
    new = state + h * drift(state)
    new[0] = new[0] + noise[0] * dW[0]
    new[1] = new[1] + noise[1] * dW[1]
    return new


# --- stop conditions --------------------------------------------------------
# Each stop exposes g(state, s) -> array; the path stops when g turns >= 0.

@dataclass(frozen=True)
class ZLimit:
    z_max: float
    reason = StopReason.Z_LIMIT

    def __call__(self, u, s):
        return u[2] - self.z_max


@dataclass(frozen=True)
class TimeLimit:
    s_max: float
    reason = StopReason.TIME_LIMIT

    def __call__(self, u, s):
        return np.full(u.shape[1:], s - self.s_max)


@dataclass(frozen=True)
class TubeExit:
    spec: TubeSpec
    reason = StopReason.TUBE_EXIT

    def __call__(self, u, s):
        z = np.clip(u[2], self.spec.z_min, self.spec.z_max)
        _, q = self.spec.membership(u[:2], z)
        return q - self.spec.r ** 2


@dataclass(frozen=True)
class EscapeExit:
    spec: EscapeSetSpec
    reason = StopReason.ESCAPE_EXIT

    def __call__(self, u, s):
        z = u[2]
        g = self.spec.distance2(u[0], u[1], z) - self.spec.radius2(np.maximum(z, 0.0))
        # D(eta) only constrains the path from z = sqrt(mu) on
        return np.where(z >= np.sqrt(self.spec.mu), g, -1.0)


@dataclass(frozen=True)
class SectionStop:
    section: SectionSpec
    reason = StopReason.SECTION_HIT

    def __call__(self, u, s):
        g = u[self.section.axis] - self.section.value
        return g * self.section.direction if self.section.direction else g


@dataclass(frozen=True)
class Divergence:
    """Treat paths leaving the box |u_i| <= bound as blown up."""
    bound: float
    reason = StopReason.NON_FINITE

    def __call__(self, u, s):
        return np.max(np.abs(u), axis=0) - self.bound


@dataclass
class SamplePath:
    s: np.ndarray
    states: np.ndarray  # (n, 3)
    reason: StopReason
    stop_s: float
    stop_state: np.ndarray
    hits: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        write_series(path, self.s, self.states)


@dataclass
class BatchResult:
    path_index: np.ndarray
    stop_s: np.ndarray
    stop_state: np.ndarray  # (n, 3)
    reason: list
    record_s: np.ndarray | None = None
    record: np.ndarray | None = None  # (n_rec, 3, n)
    hits: list | None = None  # per path: list of (s, x, y, z, grazing)


def _crossing_weight(g0, g1):
    with np.errstate(divide="ignore", invalid="ignore"):
        th = g0 / (g0 - g1)
    return np.clip(np.nan_to_num(th, nan=1.0), 0.0, 1.0)


def _simulate_block(model: SdeModel, p0: np.ndarray, h: float, master_seed: int,
                    indices: np.ndarray, stops: Sequence, max_steps: int,
                    record_every: int | None, hit_section: SectionSpec | None,
                    rearm: SectionSpec | None) -> BatchResult:
    n = len(indices)
    u = np.array(np.broadcast_to(p0.reshape(3, -1), (3, n)), dtype=float)
    noisy = not model.deterministic
    streams = [RngStream(master_seed, i) for i in indices] if noisy else []
    sqh = np.sqrt(h)
    alive = np.ones(n, dtype=bool)
    stop_s = np.full(n, np.nan)
    stop_state = np.full((n, 3), np.nan)
    reason = [None] * n
    g_prev = [np.asarray(st(u, 0.0), dtype=float) for st in stops]
    for j, g in enumerate(g_prev):
        if np.any(g >= 0):
            raise ValueError(f"initial state already violates {type(stops[j]).__name__}")
    rec_s, rec = [], []
    if record_every:
        rec_s.append(0.0)
        rec.append(u.copy())
    hits = [[] for _ in range(n)] if hit_section is not None else None
    armed = np.ones(n, dtype=bool) if rearm is None else np.zeros(n, dtype=bool)
    if hit_section is not None:
        h_prev = u[hit_section.axis] - hit_section.value
    noise_buf = None
    for k in range(max_steps):
        if noisy:
            c = k % CHUNK
            if c == 0:
                noise_buf = np.stack([st.next_chunk() for st in streams], axis=-1)
            dW = noise_buf[c] * sqh
        else:
            dW = np.zeros((2, n))
        s_new = (k + 1) * h
        u_new = em_step(u, model.drift, model.noise, h, dW)
        # frozen paths keep their stop state
        u_new[:, ~alive] = u[:, ~alive]
        bad = alive & ~np.all(np.isfinite(u_new), axis=0)
        if np.any(bad):
            for i in np.nonzero(bad)[0]:
                stop_s[i] = k * h
                stop_state[i] = u[:, i]
                reason[i] = StopReason.NON_FINITE
            alive &= ~bad
            u_new[:, bad] = u[:, bad]
        if hit_section is not None:
            if rearm is not None:
                ra = u_new[rearm.axis] - rearm.value
                armed |= alive & ((ra * rearm.direction > 0) if rearm.direction else ra > 0)
            h_new = u_new[hit_section.axis] - hit_section.value
            d = hit_section.direction
            if d > 0:
                cross = (h_prev < 0) & (h_new >= 0)
            elif d < 0:
                cross = (h_prev > 0) & (h_new <= 0)
            else:
                cross = ((h_prev < 0) & (h_new >= 0)) | ((h_prev > 0) & (h_new <= 0))
            cross &= alive & armed
            if np.any(cross):
                th = _crossing_weight(h_prev, h_new)
                for i in np.nonzero(cross)[0]:
                    p = u[:, i] + th[i] * (u_new[:, i] - u[:, i])
                    grazing = bool(abs(h_new[i] - h_prev[i]) < 1e-12)
                    hits[i].append((k * h + th[i] * h, p[0], p[1], p[2], grazing))
                if rearm is not None:
                    armed &= ~cross
            h_prev = h_new
        for j, st in enumerate(stops):
            g = np.asarray(st(u_new, s_new), dtype=float)
            trig = alive & (g >= 0)
            if np.any(trig):
                th = _crossing_weight(g_prev[j], g)
                for i in np.nonzero(trig)[0]:
                    stop_s[i] = k * h + th[i] * h
                    stop_state[i] = u[:, i] + th[i] * (u_new[:, i] - u[:, i])
                    reason[i] = st.reason
                alive &= ~trig
            g_prev[j] = g
        u = u_new
        if record_every and (k + 1) % record_every == 0:
            rec_s.append(s_new)
            rec.append(u.copy())
        if not np.any(alive):
            break
    for i in np.nonzero(alive)[0]:
        stop_s[i] = max_steps * h
        stop_state[i] = u[:, i]
        reason[i] = StopReason.TIME_LIMIT
    out = BatchResult(np.asarray(indices), stop_s, stop_state, reason, hits=hits)
    if record_every:
        out.record_s = np.array(rec_s)
        out.record = np.array(rec)
    return out


def simulate_batch(model: SdeModel, p0, config: SdeConfig, stops: Sequence = (),
                   s_max: float | None = None, record_every: int | None = None,
                   hit_section: SectionSpec | None = None,
                   rearm: SectionSpec | None = None, first_index: int = 0,
                   workers: int = 1) -> BatchResult:
    """Simulate config.n_paths paths with indices first_index, first_index+1, ...

    The horizon is ``s_max`` (time-limit censoring).  Paths are split into
    fixed blocks of BLOCK paths, which are farmed out to ``workers`` threads;
    the merged result is ordered by path index and does not depend on the
    worker count.
    """
    if not stops and s_max is None:
        raise ValueError("need a stop condition or a time limit")
    p0 = np.asarray(p0, dtype=float)
    if p0.shape[0] != 3:
        raise ValueError("initial state must have three components")
    if not np.all(np.isfinite(p0)):
        raise ValueError("initial state must be finite")
    h = config.h
    max_steps = int(np.ceil((s_max if s_max is not None else 1e6) / h - 1e-9))
    idx = np.arange(first_index, first_index + config.n_paths)
    blocks = [idx[i:i + BLOCK] for i in range(0, len(idx), BLOCK)]

    def p0_for(b):
        if p0.ndim == 1:
            return p0
        return p0[:, b - first_index]

    def run(b):
        with np.errstate(over="ignore", invalid="ignore"):
            return _simulate_block(model, p0_for(b), h, config.master_seed, b, stops,
                                   max_steps, record_every, hit_section, rearm)

    if workers <= 1 or len(blocks) == 1:
        parts = [run(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    res = BatchResult(
        np.concatenate([p.path_index for p in parts]),
        np.concatenate([p.stop_s for p in parts]),
        np.concatenate([p.stop_state for p in parts]),
        sum((p.reason for p in parts), []),
    )
    if record_every:
        res.record_s = parts[0].record_s
        n_rec = min(len(p.record) for p in parts)
        res.record = np.concatenate([p.record[:n_rec] for p in parts], axis=2)
        res.record_s = res.record_s[:n_rec]
    if hit_section is not None:
        res.hits = sum((p.hits for p in parts), [])
    return res


def simulate_path(model: SdeModel, p0, config: SdeConfig, stops: Sequence = (),
                  s_max: float | None = None, record_every: int = 1,
                  path_index: int = 0, hit_section: SectionSpec | None = None,
                  rearm: SectionSpec | None = None) -> SamplePath:
    """Single path with recorded samples and its first triggered stop."""
    cfg = SdeConfig(config.h, 1, config.master_seed, config.scheme)
    res = simulate_batch(model, p0, cfg, stops, s_max, record_every, hit_section,
                         rearm, first_index=path_index)
    s = res.record_s
    states = res.record[:, :, 0]
    keep = s <= res.stop_s[0] + 1e-12
    s, states = s[keep], states[keep]
    if s[-1] < res.stop_s[0]:
        s = np.append(s, res.stop_s[0])
        states = np.vstack([states, res.stop_state[0]])
    return SamplePath(s, states, res.reason[0], float(res.stop_s[0]),
                      res.stop_state[0], res.hits[0] if res.hits else [])


# --- exit experiments -------------------------------------------------------

@dataclass
class ExitSampleSet:
    """Per-path first-exit records.

    Exit times of censored paths are not exposed as exits; survival-type
    estimates go through ``km_survival`` in the analysis module.
    """
    path_index: np.ndarray
    tau: np.ndarray
    location: np.ndarray  # (n, 3)
    reason: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.path_index)

    @property
    def censored(self) -> np.ndarray:
        return np.array([r not in EXIT_REASONS for r in self.reason], dtype=bool)

    @property
    def n_exits(self) -> int:
        return int(np.count_nonzero(~self.censored))

    def exit_times(self) -> np.ndarray:
        return self.tau[~self.censored]

    def exit_z(self) -> np.ndarray:
        return self.location[~self.censored, 2]

    def censor_z(self) -> np.ndarray:
        return self.location[self.censored, 2]

    def exit_fraction(self) -> float:
        """Fraction of all paths that exited (censored paths count as survivors)."""
        return self.n_exits / len(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.provenance, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_csv(self, path) -> None:
        write_exits_csv(path, self)

    def write_header(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({**self.provenance, "n_paths": len(self),
                       "config_hash": self.config_hash()}, fh, indent=2,
                      sort_keys=True, default=str)


def write_exits_csv(path, exits: ExitSampleSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_index", "tau", "exit_x", "exit_y", "exit_z", "reason"])
        for i, t, p, r in zip(exits.path_index, exits.tau, exits.location, exits.reason):
            w.writerow([int(i), repr(float(t))] + [repr(float(c)) for c in p]
                       + [StopReason(r).value])


def write_series(path, s, states) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x", "y", "z"])
        for t, p in zip(s, states):
            w.writerow([repr(float(t))] + [repr(float(c)) for c in p])


@dataclass(frozen=True)
class Experiment:
    """A Monte Carlo experiment: model, start, step, stops and horizon."""
    model: SdeModel
    p0: tuple
    h: float
    stops: tuple
    s_max: float | None = None
    label: str = ""

    def provenance(self, n_paths: int, master_seed: int) -> dict:
        prm = self.model.params
        return {"experiment": self.label, "model": self.model.name,
                "params": _params_dict(prm), "p0": list(map(float, self.p0)),
                "h": self.h, "s_max": self.s_max, "seed": master_seed,
                "n_paths": n_paths}


def _params_dict(prm) -> dict:
    d = asdict(prm)

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, enum.Enum):
            return v.value
        return v
    return clean(d)


def batch_monte_carlo(experiment: Experiment, n_paths: int, master_seed: int,
                      workers: int = 1) -> ExitSampleSet:
    cfg = SdeConfig(experiment.h, n_paths, master_seed)
    res = simulate_batch(experiment.model, np.array(experiment.p0), cfg,
                         experiment.stops, experiment.s_max, workers=workers)
    return ExitSampleSet(res.path_index, res.stop_s, res.stop_state, res.reason,
                         experiment.provenance(n_paths, master_seed))


def tube_experiment(params: SystemParams, spec: TubeSpec, z0: float,
                    h: float | None = None, z_end: float | None = None) -> Experiment:
    """Paths started on the reference solution at z0, stopped on leaving the tube."""
    if params.frame is not Frame.BLOWN_UP:
        raise ValueError("tube experiments run in the blown-up frame")
    p0 = (float(spec.x_ref(z0)), float(spec.y_ref(z0)), float(z0))
    inside, _ = spec.membership(p0[:2], z0)
    if not inside:
        raise ValueError("initial point lies outside the tube")
    z_end = np.sqrt(params.mu) if z_end is None else z_end
    if z_end > spec.z_max + 1e-12:
        raise ValueError("tube does not extend to the censoring level")
    return Experiment(normal_form_model(params), p0, h or default_step(params),
                      (TubeExit(spec), ZLimit(z_end)), label="tube")


def first_exit_tube(params: SystemParams, spec: TubeSpec, z0: float, n_paths: int,
                    master_seed: int, h: float | None = None,
                    workers: int = 1) -> ExitSampleSet:
    """First z at which the tube quadratic form reaches r^2, censored at sqrt(mu)."""
    return batch_monte_carlo(tube_experiment(params, spec, z0, h), n_paths,
                             master_seed, workers)


def escape_experiment(params: SystemParams, spec: EscapeSetSpec,
                      p0: Sequence[float] | None = None, h: float | None = None,
                      z_max: float = 2.0) -> Experiment:
    """Paths started in D(eta) at z = sqrt(mu) (default: on the weak canard)."""
    if params.frame is not Frame.BLOWN_UP:
        raise ValueError("escape experiments run in the blown-up frame")
    z0 = np.sqrt(params.mu)
    if p0 is None:
        p0 = (-z0, z0 * z0 - params.mu / 2, z0)
    p0 = tuple(float(c) for c in p0)
    if abs(p0[2] - z0) > 1e-12:
        raise ValueError("escape experiments start at z = sqrt(mu)")
    if spec.distance2(p0[0], p0[1], p0[2]) >= spec.radius2(p0[2]):
        raise ValueError("initial point lies outside D(eta)")
    return Experiment(normal_form_model(params), p0, h or default_step(params),
                      (EscapeExit(spec), ZLimit(z_max)), label="escape")


def first_exit_escape_set(params: SystemParams, spec: EscapeSetSpec, n_paths: int,
                          master_seed: int, p0=None, h: float | None = None,
                          z_max: float = 2.0, workers: int = 1) -> ExitSampleSet:
    return batch_monte_carlo(escape_experiment(params, spec, p0, h, z_max), n_paths,
                             master_seed, workers)


def record_section_hits(result, section: SectionSpec | None = None) -> list:
    """Flatten recorded section hits into rows (path_index, s, x, y, z, grazing).

    ``result`` is a BatchResult or SamplePath simulated with ``hit_section``;
    with a plain SamplePath and an explicit ``section`` the hits are
    recomputed from its recorded samples by linear interpolation.
    """
    rows = []
    if isinstance(result, SamplePath):
        if section is not None:
            return [(0,) + hit for hit in _hits_from_samples(result.s, result.states, section)]
        return [(0,) + tuple(hit) for hit in result.hits]
    if result.hits is None:
        raise ValueError("batch was simulated without a hit section")
    for i, hs in zip(result.path_index, result.hits):
        rows.extend((int(i),) + tuple(hit) for hit in hs)
    return rows


def _hits_from_samples(s, states, section: SectionSpec) -> list:
    g = states[:, section.axis] - section.value
    out = []
    for k in range(len(g) - 1):
        g0, g1 = g[k], g[k + 1]
        d = section.direction
        up = g0 < 0 <= g1
        down = g0 > 0 >= g1
        if (d > 0 and up) or (d < 0 and down) or (d == 0 and (up or down)):
            th = g0 / (g0 - g1)
            p = states[k] + th * (states[k + 1] - states[k])
            out.append((s[k] + th * (s[k + 1] - s[k]), p[0], p[1], p[2],
                        bool(abs(g1 - g0) < 1e-12)))
    return out


def section_hits_array(result: BatchResult) -> tuple:
    """(path_index, hits (m, 4) with columns s, x, y, z, censored mask per path)."""
    rows = record_section_hits(result)
    arr = np.array([r[1:5] for r in rows], dtype=float).reshape(-1, 4)
    owner = np.array([r[0] for r in rows], dtype=int)
    censored = np.array([len(h) == 0 for h in result.hits], dtype=bool)
    return owner, arr, censored
