import json

import numpy as np
import pytest

from duckhunt import sde
from duckhunt.canard import SectionSpec
from duckhunt.covariance import EscapeSetSpec, TubeSpec, integrate_covariance, weak_x
from duckhunt.model import Frame, GlobalReturnParams, JUMP_DENSITY_PARAMS, SystemParams
from duckhunt.sde import (Divergence, ExitSampleSet, RngStream, SdeConfig, SdeModel,
                          StopReason, TimeLimit, ZLimit, em_step, simulate_batch,
                          simulate_path)


def ou_model(noise=0.3):
    # dx = -x dt + noise dW, z drifts at unit speed as a clock
    return SdeModel(lambda u: np.stack([-u[0], 0 * u[1], 1 + 0 * u[2]]),
                    np.array([noise, 0.0]), "ou", None)


def test_config_validation():
    with pytest.raises(ValueError):
        SdeConfig(h=0.0)
    with pytest.raises(ValueError):
        SdeConfig(h=1e-3, n_paths=0)
    with pytest.raises(ValueError):
        SdeConfig(h=1e-3, master_seed=-1)
    with pytest.raises(ValueError):
        SdeConfig(h=1e-3, scheme="milstein")


def test_default_step():
    assert sde.default_step(SystemParams(mu=0.05)) == pytest.approx(5e-4)
    assert sde.default_step(SystemParams(mu=0.5)) == pytest.approx(1e-3)
    assert sde.default_step(JUMP_DENSITY_PARAMS.system) == pytest.approx(1e-4)


def test_global_return_model_needs_original_frame():
    gp = GlobalReturnParams(0.2, -1.1, SystemParams(mu=0.1))
    with pytest.raises(ValueError):
        sde.global_return_model(gp)


def test_rng_stream_is_keyed_by_seed_and_path():
    a, b = RngStream(5, 3), RngStream(5, 3)
    assert np.array_equal(a.next_chunk(), b.next_chunk())
    assert not np.array_equal(RngStream(5, 4).next_chunk(), RngStream(5, 3).next_chunk())
    assert not np.array_equal(RngStream(6, 3).next_chunk(), RngStream(5, 3).next_chunk())
    assert a.next_chunk().shape == (sde.CHUNK, 2)


def test_em_step_by_hand():
    u = np.array([[1.0], [2.0], [3.0]])
    new = em_step(u, lambda v: np.stack([-v[0], v[1], 0 * v[2]]), np.array([0.5, 2.0]),
                  0.1, np.array([[0.2], [-0.1]]))
    assert np.allclose(new[:, 0], [1 - 0.1 + 0.1, 2 + 0.2 - 0.2, 3.0])


def test_zero_noise_matches_plain_recursion():
    p = SystemParams(mu=0.1)
    m = sde.normal_form_model(p)
    h = 1e-3
    path = simulate_path(m, [0.5, 0.2, -0.5], SdeConfig(h), s_max=1.0, record_every=1)
    u = np.array([0.5, 0.2, -0.5])
    for _ in range(1000):
        u = u + h * np.array([u[1] - u[0] ** 2, -1.1 * u[0] - u[2], 0.05])
    assert np.allclose(path.states[-1], u, rtol=1e-12, atol=1e-14)
    assert path.reason is StopReason.TIME_LIMIT


def test_ou_variance_matches_discrete_recursion():
    # exact variance of the EM recursion for dx = -x dt + a dW
    h, n_steps, a = 0.01, 100, 0.3
    res = simulate_batch(ou_model(a), [0.0, 0.0, 0.0], SdeConfig(h, 20000, 11),
                         s_max=n_steps * h)
    x = res.stop_state[:, 0]
    var_exact = a * a * h * np.sum((1 - h) ** (2 * np.arange(n_steps)))
    se = var_exact * np.sqrt(2 / len(x))
    assert abs(x.var() - var_exact) < 4 * se
    assert abs(x.mean()) < 4 * np.sqrt(var_exact / len(x))


def test_paths_independent_of_batching(monkeypatch):
    m = ou_model()
    cfg = SdeConfig(0.01, 40, 9)
    ref = simulate_batch(m, [0.0, 0.0, 0.0], cfg, [ZLimit(0.5)], s_max=1.0)
    monkeypatch.setattr(sde, "BLOCK", 7)
    for workers in (1, 3):
        other = simulate_batch(m, [0.0, 0.0, 0.0], cfg, [ZLimit(0.5)], s_max=1.0,
                               workers=workers)
        assert np.array_equal(ref.stop_state, other.stop_state)
        assert np.array_equal(ref.stop_s, other.stop_s)
    single = simulate_path(m, [0.0, 0.0, 0.0], SdeConfig(0.01, 1, 9), [ZLimit(0.5)],
                           s_max=1.0, path_index=17)
    assert np.array_equal(single.stop_state, ref.stop_state[17])


def test_stop_interpolation():
    res = simulate_batch(ou_model(0.0), [1.0, 0.0, 0.0], SdeConfig(0.03, 1), [ZLimit(0.5)])
    assert res.reason[0] is StopReason.Z_LIMIT
    assert res.stop_s[0] == pytest.approx(0.5)
    assert res.stop_state[0, 2] == pytest.approx(0.5)
    res = simulate_batch(ou_model(0.0), [1.0, 0.0, 0.0], SdeConfig(0.03, 1), [TimeLimit(0.2)])
    assert res.reason[0] is StopReason.TIME_LIMIT
    assert res.stop_s[0] == pytest.approx(0.2)


def test_initial_violation_and_bad_start():
    with pytest.raises(ValueError):
        simulate_batch(ou_model(), [0.0, 0.0, 1.0], SdeConfig(0.01), [ZLimit(0.5)])
    with pytest.raises(ValueError):
        simulate_batch(ou_model(), [np.nan, 0.0, 0.0], SdeConfig(0.01), s_max=1.0)
    with pytest.raises(ValueError):
        simulate_batch(ou_model(), [0.0, 0.0, 0.0], SdeConfig(0.01))


def test_blow_up_reported_as_non_finite():
    m = SdeModel(lambda u: np.stack([u[0] ** 2, 0 * u[1], 0 * u[2]]), np.zeros(2), "blow", None)
    res = simulate_batch(m, [1.0, 0.0, 0.0], SdeConfig(0.01), s_max=5.0)
    assert res.reason[0] is StopReason.NON_FINITE
    res = simulate_batch(m, [1.0, 0.0, 0.0], SdeConfig(0.01), [Divergence(10.0)], s_max=5.0)
    assert res.reason[0] is StopReason.NON_FINITE and res.stop_s[0] < 1.0


def test_section_hits_and_rearm():
    # rotation started at (1, 0): x = cos s, y = sin s
    m = SdeModel(lambda u: np.stack([-u[1], u[0], 0 * u[2]]), np.zeros(2), "rot", None)
    sec = SectionSpec("x", 0.0, -1)
    res = simulate_batch(m, [1.0, 0.0, 0.0], SdeConfig(1e-3), s_max=15.0, hit_section=sec)
    owner, hits, censored = sde.section_hits_array(res)
    assert np.allclose(hits[:, 0], [np.pi / 2, 5 * np.pi / 2, 9 * np.pi / 2], atol=1e-3)
    assert np.allclose(hits[:, 1], 0.0, atol=1e-6)
    assert list(owner) == [0, 0, 0] and not censored[0]
    # hits are armed only after a visit to y < -0.5, and disarmed by each hit
    rearm = SectionSpec("y", -0.5, -1)
    res2 = simulate_batch(m, [1.0, 0.0, 0.0], SdeConfig(1e-3), s_max=15.0, hit_section=sec,
                          rearm=rearm)
    _, hits2, _ = sde.section_hits_array(res2)
    assert np.allclose(hits2[:, 0], [5 * np.pi / 2, 9 * np.pi / 2], atol=1e-3)


def small_tube(params, r):
    mu = params.mu
    zs = np.linspace(-1.0, np.sqrt(mu), 401)
    cov = integrate_covariance(weak_x, -1.0, [1, 1, 0], mu, 1.0, np.sqrt(mu), zs)
    return TubeSpec(lambda z: -np.asarray(z), lambda z: np.square(z) - mu / 2, cov, r)


def test_tube_exits_and_export(tmp_path):
    p = SystemParams(mu=0.08, sigma=0.008, sigma_prime=0.008)
    ex = sde.first_exit_tube(p, small_tube(p, 2 * 0.008), -1.0, 50, 1)
    assert len(ex) == 50 and ex.n_exits > 25
    assert np.all(ex.exit_z() <= np.sqrt(0.08) + 1e-12)
    assert set(ex.reason) <= {StopReason.TUBE_EXIT, StopReason.Z_LIMIT}
    ex.to_csv(tmp_path / "e.csv")
    ex.write_header(tmp_path / "e.json")
    head = json.loads((tmp_path / "e.json").read_text())
    assert head["n_paths"] == 50 and head["seed"] == 1
    assert head["config_hash"] == ex.config_hash()
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert len(rows) == 51


def test_tube_rejects_outside_start():
    p = SystemParams(mu=0.08, sigma=0.008, sigma_prime=0.008)
    tube = small_tube(p, 0.01)
    with pytest.raises(ValueError):
        sde.tube_experiment(p, tube, 0.5)
    with pytest.raises(ValueError):
        sde.tube_experiment(p.to_frame(Frame.ORIGINAL), tube, -1.0)


def test_escape_experiment_start():
    p = SystemParams(mu=0.05, sigma=0.01, sigma_prime=0.01)
    spec = EscapeSetSpec(0.5, 0.05)
    exp = sde.escape_experiment(p, spec)
    assert exp.p0[2] == pytest.approx(np.sqrt(0.05))
    with pytest.raises(ValueError):
        sde.escape_experiment(p, spec, p0=(0.0, 0.0, 0.1))
    with pytest.raises(ValueError):
        sde.escape_experiment(p, spec, p0=(3.0, 0.0, np.sqrt(0.05)))
    ex = sde.first_exit_escape_set(p, spec, 20, 3)
    assert np.all(ex.exit_z() >= np.sqrt(0.05))


def test_exit_sample_set_censoring():
    ex = ExitSampleSet(np.arange(3), np.array([1.0, 2.0, 3.0]), np.zeros((3, 3)),
                       [StopReason.TUBE_EXIT, StopReason.Z_LIMIT, StopReason.ESCAPE_EXIT])
    assert list(ex.censored) == [False, True, False]
    assert ex.n_exits == 2 and ex.exit_fraction() == pytest.approx(2 / 3)
    assert list(ex.exit_times()) == [1.0, 3.0]


def test_disjoint_seed_ranges_agree():
    from scipy import stats
    p = SystemParams(mu=0.05, sigma=0.01, sigma_prime=0.01)
    spec = EscapeSetSpec(0.5, 0.05)
    exp = sde.escape_experiment(p, spec, z_max=3.0)
    cfg = SdeConfig(exp.h, 400, 21)
    a = simulate_batch(exp.model, np.array(exp.p0), cfg, exp.stops)
    b = simulate_batch(exp.model, np.array(exp.p0), cfg, exp.stops, first_index=400)
    assert stats.ks_2samp(a.stop_state[:, 2], b.stop_state[:, 2]).pvalue > 0.01


def test_zero_noise_batch_is_a_point_mass():
    from duckhunt.analysis import escape_density
    quiet = GlobalReturnParams(JUMP_DENSITY_PARAMS.a, JUMP_DENSITY_PARAMS.b,
                               SystemParams(mu=0.143, eps=0.01, frame=Frame.ORIGINAL))
    m = sde.global_return_model(quiet)
    assert m.deterministic
    p0 = [-0.3, 0.01482182, 0.05857431]
    res = simulate_batch(m, p0, SdeConfig(1e-4, 600, 5), s_max=4.0,
                         hit_section=SectionSpec("x", -0.3, -1), rearm=SectionSpec("x", 0.0, 1))
    owner, hits, censored = sde.section_hits_array(res)
    assert not censored.any() and len(hits) == 600
    assert np.all(hits == hits[0])
    d = escape_density(hits[:, 2:4])
    assert d.n_modes == 1
    assert np.allclose(d.modes[0][:2], hits[0, 2:4])
    assert abs(hits[0, 3] - 0.0586) < 1e-3


@pytest.mark.slow
def test_step_halving_moves_mean_exit_z_little():
    p = SystemParams(mu=0.08, sigma=0.008, sigma_prime=0.008)
    tube = small_tube(p, 2.5 * 0.008)
    h = sde.default_step(p)
    runs = [sde.first_exit_tube(p, tube, -1.0, 2000, 8, h=hh) for hh in (h, h / 2)]
    zs = [r.location[:, 2] for r in runs]
    se = np.sqrt(sum(z.var() / len(z) for z in zs))
    # independent streams at the two step sizes, so compare against the difference's error
    assert abs(zs[0].mean() - zs[1].mean()) < 3 * se
