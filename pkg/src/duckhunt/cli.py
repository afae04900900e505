"""Command-line driver: one subcommand per experiment, configured by TOML files.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import analysis, canard, covariance, sde
from .model import Frame, GlobalReturnParams, SystemParams, drift_global_return
from .odeint import IntegrationError, IntegratorConfig, SectionEvent, integrate
from .sde import StopReason

SCHEMA_VERSION = 1
MODELS = ("normal-form-blownup", "normal-form-original", "global-return")


class ConfigError(ValueError):
    pass


# Per-command experiment keys and their defaults.  None marks a key that must
# be supplied.
EXPERIMENT_KEYS = {
    "simulate": {"p0": None, "s_max": None, "n_paths": 1, "record_every": 10,
                 "classify": False},
    "canards": {"n_seeds": 400, "tol": canard.DEFAULT_TOL, "section": "z",
                "section_value": 0.0, "spacing_section_value": 1.0},
    "tube": {"r2": 0.02, "z0": -1.0, "n_paths": 1000, "n_samples": 2001,
             "n_show": 5},
    "exits": {"eta": 0.5, "n_paths": 1000, "z_max": 3.0},
    "regime-map": {"c0": 1.0, "mu_min": 0.005, "mu_max": 0.5, "n_mu": 200,
                   "sigma_min": 1e-4, "sigma_max": 1.0, "n_sigma": 200,
                   "k_curves": 6},
    "density": {"n_paths": 4000, "s_max": 20.0, "section_x": -0.3,
                "rearm_x": 0.0, "p0": [], "settle": 60.0, "bins": 60},
    "mmo": {"p0": [0.0, 0.0, 0.0], "s_max": 150.0, "n_paths": 12,
            "record_every": 10, "bound": 5.0, "det_step": 0.002},
}
PARAM_KEYS = {"mu", "eps", "sigma", "sigma_prime", "a", "b"}
SDE_KEYS = {"h", "seed"}
INTEGRATOR_KEYS = {"abs_tol", "rel_tol", "initial_step", "max_step", "min_step",
                   "max_steps"}
TOP_KEYS = {"schema", "command", "model", "params", "sde", "integrator",
            "experiment"}


def _load_file(path: str) -> dict:
    p = Path(path)
    try:
        if p.suffix == ".json":
            return json.loads(p.read_text())
        import tomli
        return tomli.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (ValueError, OSError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def _check_keys(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"[{where}] must be a table")
    extra = set(section) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(extra))}")


def resolve_config(raw: dict, command: str) -> dict:
    """Validate a raw config for ``command`` and fill in defaults."""
    cfg = copy.deepcopy(raw)
    _check_keys(cfg, TOP_KEYS, "top level")
    if cfg.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {cfg.get('schema')}")
    cfg["schema"] = SCHEMA_VERSION
    if cfg.setdefault("command", command) != command:
        raise ConfigError(f"config is for '{cfg['command']}', not '{command}'")
    model = cfg.get("model", "global-return" if command in ("density", "mmo")
                    else "normal-form-blownup")
    if model not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}")
    cfg["model"] = model
    params = cfg.setdefault("params", {})
    _check_keys(params, PARAM_KEYS, "params")
    if "mu" not in params:
        raise ConfigError("params.mu is required")
    for k, v in params.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"params.{k} must be a number")
    params.setdefault("eps", 0.01)
    params.setdefault("sigma", 0.0)
    params.setdefault("sigma_prime", 0.0)
    if model == "global-return":
        for k in ("a", "b"):
            if k not in params:
                raise ConfigError(f"params.{k} is required for the global-return model")
    elif "a" in params or "b" in params:
        raise ConfigError("params a, b only apply to the global-return model")
    sde_cfg = cfg.setdefault("sde", {})
    _check_keys(sde_cfg, SDE_KEYS, "sde")
    sde_cfg.setdefault("seed", 0)
    integ = cfg.setdefault("integrator", {})
    _check_keys(integ, INTEGRATOR_KEYS, "integrator")
    exp = cfg.setdefault("experiment", {})
    defaults = EXPERIMENT_KEYS[command]
    _check_keys(exp, defaults, "experiment")
    for k, default in defaults.items():
        if k not in exp:
            if default is None:
                raise ConfigError(f"experiment.{k} is required for '{command}'")
            exp[k] = copy.deepcopy(default)
    try:
        system_params(cfg)
        if integ:
            IntegratorConfig(**integ)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if sde_cfg.get("h") is None:
        sde_cfg["h"] = sde.default_step(system_params(cfg))
    if not (isinstance(sde_cfg["seed"], int) and 0 <= sde_cfg["seed"] < 2 ** 64):
        raise ConfigError("sde.seed must be an unsigned 64-bit integer")
    return cfg


def system_params(cfg: dict) -> SystemParams:
    p = cfg["params"]
    frame = Frame.BLOWN_UP if cfg["model"] == "normal-form-blownup" else Frame.ORIGINAL
    return SystemParams(mu=p["mu"], eps=p["eps"], sigma=p["sigma"],
                        sigma_prime=p["sigma_prime"], frame=frame)


def model_for(cfg: dict):
    sp = system_params(cfg)
    if cfg["model"] == "global-return":
        gp = GlobalReturnParams(cfg["params"]["a"], cfg["params"]["b"], sp)
        return sde.global_return_model(gp), gp
    return sde.normal_form_model(sp), sp


def integrator_config(cfg: dict, **defaults) -> IntegratorConfig:
    return IntegratorConfig(**{**defaults, **cfg["integrator"]})


def _vec3(v, name):
    if not (isinstance(v, list) and len(v) == 3
            and all(isinstance(c, (int, float)) for c in v)):
        raise ConfigError(f"{name} must be a list of three numbers")
    return np.array(v, dtype=float)


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


# --- commands ----------------------------------------------------------------

def cmd_simulate(cfg: dict, out: Path, workers: int = 1) -> list:
    """Deterministic and stochastic time series from a common start.

    The deterministic series is the same Euler-Maruyama recursion with the
    noise switched off, so a zero-noise config yields identical files.
    """
    exp = cfg["experiment"]
    p0 = _vec3(exp["p0"], "experiment.p0")
    mdl, prm = model_for(cfg)
    h, seed = cfg["sde"]["h"], cfg["sde"]["seed"]
    quiet = sde.SdeModel(mdl.drift, np.zeros(2), mdl.name, mdl.params)
    stops = [sde.Divergence(1e6)]
    det = sde.simulate_path(quiet, p0, sde.SdeConfig(h, 1, seed), stops, exp["s_max"],
                            exp["record_every"])
    det.to_csv(out / "deterministic.csv")
    files = ["deterministic.csv"]
    res = sde.simulate_batch(mdl, p0, sde.SdeConfig(h, exp["n_paths"], seed), stops,
                             exp["s_max"], exp["record_every"], workers=workers)
    patterns = {}
    for j in range(exp["n_paths"]):
        name = f"stochastic_{j:04d}.csv"
        st = res.record[:, :, j]
        keep = res.record_s <= res.stop_s[j] + 1e-12
        sde.write_series(out / name, res.record_s[keep], st[keep])
        files.append(name)
        if exp["classify"] and cfg["model"] == "global-return":
            patterns[name] = analysis.classify_mmo(st[keep], prm).segments
    if exp["classify"] and cfg["model"] == "global-return":
        patterns["deterministic.csv"] = analysis.classify_mmo(det.states, prm, 0.0).segments
        _json(out / "patterns.json", patterns)
        files.append("patterns.json")
    return files


def cmd_canards(cfg: dict, out: Path, workers: int = 1) -> list:
    if cfg["model"] != "normal-form-blownup":
        raise ConfigError("canards are computed for the blown-up normal form")
    exp = cfg["experiment"]
    try:
        section = canard.SectionSpec(exp["section"], float(exp["section_value"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad section: {exc}") from None
    if section.kind != "z":
        raise ConfigError("maximal canards are located on a z-section")
    if not (isinstance(exp["n_seeds"], int) and exp["n_seeds"] >= 2):
        raise ConfigError("experiment.n_seeds must be an integer >= 2")
    sp = system_params(cfg)
    icfg = integrator_config(cfg, abs_tol=1e-12, rel_tol=1e-12, max_step=0.1)
    seeds = canard.default_seeds(sp.mu, exp["n_seeds"])
    att = canard.attracting_slice(sp, section, seeds, icfg)
    rep = canard.repelling_slice(sp, section, seeds, icfg)
    recs = canard.find_maximal_canards(att, rep, exp["tol"])
    canard.assign_twists(recs, sp)
    att.to_csv(out / "attracting_slice.csv")
    rep.to_csv(out / "repelling_slice.csv")
    canard.records_to_csv(recs, out / "canards.csv")
    spacing = None
    summary_extra = {}
    if sum(r.status == "resolved" for r in recs) >= 2:
        spacing = canard.canard_spacing(recs, sp, section, icfg)
        y_sec = canard.SectionSpec("y", float(exp["spacing_section_value"]), -1)
        sep = canard.canard_spacing(recs, sp, y_sec, icfg)
        summary_extra = {"z_cross": sep.z_cross.tolist(),
                         "z_separation": sep.z_separation.tolist(),
                         "separation_over_sqrt_eps": sep.sep_over_sqrt_eps.tolist()}
    summ = canard.summary(recs, sp, spacing)
    summ.update(summary_extra)
    _json(out / "summary.json", summ)
    return ["attracting_slice.csv", "repelling_slice.csv", "canards.csv", "summary.json"]


def build_tube(sp: SystemParams, r: float, z0: float, n_samples: int) -> covariance.TubeSpec:
    mu = sp.mu
    zs = np.linspace(z0, np.sqrt(mu), n_samples)
    cov = covariance.integrate_covariance(covariance.weak_x, z0, [1.0, 1.0, 0.0], mu,
                                          sp.rho, np.sqrt(mu), zs)
    return covariance.TubeSpec(lambda z: -np.asarray(z),
                               lambda z: np.square(z) - mu / 2, cov, r)


def cmd_tube(cfg: dict, out: Path, workers: int = 1) -> list:
    if cfg["model"] != "normal-form-blownup":
        raise ConfigError("tubes are computed in the blown-up frame")
    exp = cfg["experiment"]
    sp = system_params(cfg)
    if sp.sigma <= 0:
        raise ConfigError("tube experiments need sigma > 0")
    if exp["r2"] <= 0:
        raise ConfigError("experiment.r2 must be positive")
    tube = build_tube(sp, float(np.sqrt(exp["r2"])), exp["z0"], exp["n_samples"])
    c = tube.cov
    kp, km = covariance.tube_norms(c.v1, c.v2, c.v3)
    with open(out / "tube.csv", "w") as fh:
        fh.write("z,v1,v2,v3,K_plus,K_minus\n")
        for row in zip(c.z, c.v1, c.v2, c.v3, kp, km):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    seed = cfg["sde"]["seed"]
    exits = sde.first_exit_tube(sp, tube, exp["z0"], exp["n_paths"], seed,
                                h=cfg["sde"]["h"], workers=workers)
    exits.to_csv(out / "exits.csv")
    exits.write_header(out / "exits.json")
    files = ["tube.csv", "exits.csv", "exits.json"]
    if exp["n_show"] > 0:
        res = sde.simulate_batch(sde.normal_form_model(sp),
                                 np.array(sde.tube_experiment(sp, tube, exp["z0"]).p0),
                                 sde.SdeConfig(cfg["sde"]["h"], exp["n_show"], seed),
                                 [sde.ZLimit(np.sqrt(sp.mu))], record_every=20,
                                 workers=workers)
        for j in range(exp["n_show"]):
            name = f"path_{j:04d}.csv"
            sde.write_series(out / name, res.record_s, res.record[:, :, j])
            files.append(name)
    return files


def cmd_exits(cfg: dict, out: Path, workers: int = 1) -> list:
    if cfg["model"] != "normal-form-blownup":
        raise ConfigError("escape experiments run in the blown-up frame")
    exp = cfg["experiment"]
    sp = system_params(cfg)
    if sp.sigma <= 0:
        raise ConfigError("escape experiments need sigma > 0")
    spec = covariance.EscapeSetSpec(exp["eta"], sp.mu)
    exits = sde.first_exit_escape_set(sp, spec, exp["n_paths"], cfg["sde"]["seed"],
                                      h=cfg["sde"]["h"], z_max=exp["z_max"],
                                      workers=workers)
    exits.to_csv(out / "exits.csv")
    exits.write_header(out / "exits.json")
    files = ["exits.csv", "exits.json"]
    z = exits.exit_z()
    fit = {"n_exits": exits.n_exits, "n_censored": int(exits.censored.sum())}
    if exits.n_exits:
        fit["median_exit_z"] = float(np.median(z))
        fit["median_over_scale"] = float(np.median(z) / np.sqrt(sp.mu * abs(np.log(sp.sigma))))
    try:
        f = analysis.exit_scaling_fit(exits, sp.mu, sp.sigma)
        fit.update(kappa=f.kappa, r2=f.r2)
    except analysis.InsufficientData as exc:
        fit["fit_error"] = str(exc)
    _json(out / "fit.json", fit)
    files.append("fit.json")
    return files


def cmd_regime_map(cfg: dict, out: Path, workers: int = 1) -> list:
    exp = cfg["experiment"]
    if not 0 < exp["mu_min"] < exp["mu_max"] < 1:
        raise ConfigError("need 0 < mu_min < mu_max < 1")
    if not 0 < exp["sigma_min"] < exp["sigma_max"]:
        raise ConfigError("need 0 < sigma_min < sigma_max")
    mu = np.geomspace(exp["mu_min"], exp["mu_max"], exp["n_mu"])
    sig = np.geomspace(exp["sigma_min"], exp["sigma_max"], exp["n_sigma"])
    rm = analysis.regime_map(mu, sig, exp["c0"], exp["k_curves"])
    rm.to_csv(out / "regime.csv")
    rm.to_matrix(out / "regime.matrix")
    rm.boundaries_to_csv(out / "boundaries.csv")
    return ["regime.csv", "regime.matrix", "boundaries.csv"]


def deterministic_section_point(gp: GlobalReturnParams, x_section: float,
                                settle: float) -> np.ndarray:
    """Last downward crossing of x = x_section on the settled deterministic orbit."""
    cfg = IntegratorConfig(abs_tol=1e-10, rel_tol=1e-10, max_step=gp.system.eps / 2)
    ev = SectionEvent(0, x_section, -1)
    tr = integrate(lambda s, u: drift_global_return(u, gp), np.array([0.5, 0.3, -0.1]),
                   (0.0, settle), cfg, events=[ev], store=False)
    if not tr.crossings:
        raise IntegrationError("non-finite", settle, "orbit never reaches the section")
    return tr.crossings[-1].state


def cmd_density(cfg: dict, out: Path, workers: int = 1) -> list:
    if cfg["model"] != "global-return":
        raise ConfigError("escape densities use the global-return model")
    exp = cfg["experiment"]
    mdl, gp = model_for(cfg)
    det_pt = deterministic_section_point(gp, exp["section_x"], exp["settle"])
    p0 = det_pt if not exp["p0"] else _vec3(exp["p0"], "experiment.p0")
    sec = canard.SectionSpec("x", exp["section_x"], -1)
    rearm = canard.SectionSpec("x", exp["rearm_x"], 1)
    res = sde.simulate_batch(mdl, p0, sde.SdeConfig(cfg["sde"]["h"], exp["n_paths"],
                                                    cfg["sde"]["seed"]),
                             [sde.Divergence(1e3)], exp["s_max"], hit_section=sec,
                             rearm=rearm, workers=workers)
    owner, hits, censored = sde.section_hits_array(res)
    with open(out / "hits.csv", "w") as fh:
        fh.write("path_index,s,x,y,z\n")
        for i, row in zip(owner, hits):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    dens = analysis.escape_density(hits[:, 2:4], bins=exp["bins"],
                                   reference=(float(det_pt[1]), float(det_pt[2])))
    dens.to_csv(out / "density.csv")
    summ = dens.summary()
    summ.update(median_hit_z=float(np.median(hits[:, 3])),
                deterministic_hit_z=float(det_pt[2]),
                n_censored_paths=int(censored.sum()))
    _json(out / "density.json", summ)
    return ["hits.csv", "density.csv", "density.json"]


def cmd_mmo(cfg: dict, out: Path, workers: int = 1) -> list:
    if cfg["model"] != "global-return":
        raise ConfigError("MMO classification uses the global-return model")
    exp = cfg["experiment"]
    mdl, gp = model_for(cfg)
    p0 = _vec3(exp["p0"], "experiment.p0")
    icfg = integrator_config(cfg, abs_tol=1e-9, rel_tol=1e-9, max_step=gp.system.eps / 2)
    tr = integrate(lambda s, u: drift_global_return(u, gp), p0, (0.0, exp["s_max"]), icfg)
    s = np.arange(0.0, exp["s_max"], exp["det_step"])
    det = tr(s)
    sde.write_series(out / "deterministic.csv", s, det)
    det_pat = analysis.classify_mmo(det, gp, 0.0)
    det_pat.to_csv(out / "pattern_deterministic.csv")
    res = sde.simulate_batch(mdl, p0, sde.SdeConfig(cfg["sde"]["h"], exp["n_paths"],
                                                    cfg["sde"]["seed"]),
                             [sde.Divergence(exp["bound"])], exp["s_max"],
                             exp["record_every"], workers=workers)
    rows = []
    for j in range(exp["n_paths"]):
        keep = res.record_s <= res.stop_s[j] + 1e-12
        pat = analysis.classify_mmo(res.record[keep, :, j], gp)
        rows += [(j, k, L, sc) for k, (L, sc) in enumerate(pat.segments)]
    with open(out / "pattern_stochastic.csv", "w") as fh:
        fh.write("path,segment,L,s\n")
        for r in rows:
            fh.write(",".join(map(str, r)) + "\n")
    L_sto = [r[2] for r in rows]
    summ = {"deterministic": det_pat.symbol(),
            "deterministic_L": det_pat.lao_counts,
            "stochastic_cycles": len(L_sto),
            "stochastic_fraction_L1": (float(np.mean(np.array(L_sto) == 1))
                                       if L_sto else None),
            "stop_reasons": dict(Counter(StopReason(r).value for r in res.reason))}
    _json(out / "summary.json", summ)
    return ["deterministic.csv", "pattern_deterministic.csv", "pattern_stochastic.csv",
            "summary.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "canards": cmd_canards,
    "tube": cmd_tube,
    "exits": cmd_exits,
    "regime-map": cmd_regime_map,
    "density": cmd_density,
    "mmo": cmd_mmo,
}


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("DUCKHUNT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError("DUCKHUNT_THREADS must be an integer") from None
        if n < 1:
            raise ConfigError("DUCKHUNT_THREADS must be positive")
        return n
    return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="duckhunt",
                                 description="Folded-node canard and noise experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML (or echoed JSON) config")
        p.add_argument("--seed", type=int, help="master seed, overrides sde.seed")
        p.add_argument("--threads", type=int, help="worker threads (default $DUCKHUNT_THREADS or 1)")
        p.add_argument("--out", default=".", help="output directory")
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        raw = _load_file(args.config)
        if args.seed is not None:
            raw.setdefault("sde", {})["seed"] = args.seed
        cfg = resolve_config(raw, args.command)
        workers = _threads(args.threads)
        if workers < 1:
            raise ConfigError("--threads must be positive")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _json(out / "resolved_config.json", cfg)
        files = COMMANDS[args.command](cfg, out, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, covariance.CovarianceError, analysis.InsufficientData,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    for f in files:
        print(out / f)
    return 0


def main() -> None:
    sys.exit(run())
