import numpy as np
import pytest

from duckhunt.model import CanardBranch, SystemParams, benoit_canard, drift_normal_form
from duckhunt.odeint import (IntegrationError, IntegratorConfig, SectionEvent,
                             alpha_phase, integrate, principal_solution)


def test_exponential_decay_and_dense_output():
    tr = integrate(lambda s, u: -u, np.array([1.0]), (0.0, 5.0),
                   IntegratorConfig(1e-12, 1e-12))
    assert tr.end[0] == pytest.approx(np.exp(-5.0), rel=1e-10)
    s = np.linspace(0, 5, 37)
    assert np.allclose(tr(s)[:, 0], np.exp(-s), rtol=1e-9)


def test_harmonic_oscillator_backward():
    f = lambda s, u: np.array([u[1], -u[0]])
    tr = integrate(f, np.array([1.0, 0.0]), (0.0, -3.0), IntegratorConfig(1e-12, 1e-12))
    assert np.allclose(tr.end, [np.cos(3.0), np.sin(3.0)], atol=1e-10)
    assert np.allclose(tr(-1.0), [np.cos(1.0), np.sin(1.0)], atol=1e-9)
    with pytest.raises(ValueError):
        tr(0.5)


def test_section_events_directions():
    # x = cos s crosses zero downward at pi/2 + 2k pi and upward at 3pi/2 + 2k pi
    f = lambda s, u: np.array([u[1], -u[0]])
    cfg = IntegratorConfig(1e-12, 1e-12)
    times = {}
    for d in (-1, 1, 0):
        tr = integrate(f, np.array([1.0, 0.0]), (0.0, 10.0), cfg,
                       events=[SectionEvent(0, 0.0, d)])
        times[d] = [c.s for c in tr.crossings]
    assert np.allclose(times[-1], [np.pi / 2, 5 * np.pi / 2], atol=1e-9)
    assert np.allclose(times[1], [3 * np.pi / 2], atol=1e-9)
    assert np.allclose(sorted(times[0]), [np.pi / 2, 3 * np.pi / 2, 5 * np.pi / 2], atol=1e-9)


def test_terminal_event_stops():
    tr = integrate(lambda s, u: np.array([1.0]), np.array([0.0]), (0.0, 10.0),
                   events=[SectionEvent(0, 2.5, 1)], terminal=True)
    assert tr.s[-1] == pytest.approx(2.5, abs=1e-9)


def test_blowup_raises():
    with pytest.raises(IntegrationError):
        integrate(lambda s, u: u * u, np.array([1.0]), (0.0, 2.0),
                  IntegratorConfig(1e-10, 1e-10, max_steps=10_000))


def test_batch_matches_scalar():
    p = SystemParams(mu=0.1)
    f = lambda s, u: drift_normal_form(u, p)
    batch = np.array([[1.0, 2.0], [1.0, 4.0], [-1.0, -1.0]])
    tb = integrate(f, batch, (0.0, 3.0), IntegratorConfig(1e-11, 1e-11), store=False)
    for j in range(2):
        ts = integrate(f, batch[:, j], (0.0, 3.0), IntegratorConfig(1e-11, 1e-11))
        assert np.allclose(tb.end[:, j], ts.end, atol=1e-8)


def test_tracks_weak_canard():
    mu = 0.08
    p = SystemParams(mu=mu)
    s0 = -2.0 / mu
    c0 = benoit_canard(s0, CanardBranch.WEAK, mu)
    tr = integrate(lambda s, u: drift_normal_form(u, p), np.array(c0[:3]), (s0, 0.0),
                   IntegratorConfig(1e-12, 1e-12, max_step=0.1))
    assert np.abs(tr.end - np.array(benoit_canard(0.0, CanardBranch.WEAK, mu)[:3])).max() < 1e-6


def test_principal_solution_determinant():
    # Liouville: det U = exp(int tr A / mu) with tr A = -4 x = 4 z on the weak canard
    mu, z0 = 0.1, -0.8
    z = np.array([-0.6, -0.3, 0.0])
    ps = principal_solution(z0, z, mu, lambda zz: -zz)
    det = np.linalg.det(ps.U)
    assert np.allclose(det, np.exp(2 * (z * z - z0 * z0) / mu), rtol=1e-7)


def test_alpha_phase_closed_form():
    alpha, phi = alpha_phase(0.0, -0.5, 0.1)
    assert alpha == pytest.approx(-0.25)
    assert phi > 0
    assert alpha_phase(0.3, 0.3, 0.1) == (0.0, 0.0)
