import numpy as np
import pytest
from scipy import stats

from duckhunt import analysis as an
from duckhunt.model import TWO_LAO_PARAMS
from duckhunt.sde import ExitSampleSet, StopReason


def test_sigma_k_values_and_validation():
    assert an.sigma_k(0.1, 0) == pytest.approx(0.1 ** 0.25 * np.exp(-0.1))
    assert an.sigma_k(0.1, 2, c0=0.5) == pytest.approx(0.1 ** 0.25 * np.exp(-1.25))
    with pytest.raises(ValueError):
        an.sigma_k(1.0, 0)
    with pytest.raises(ValueError):
        an.sigma_k(0.1, -1)


@pytest.mark.parametrize("mu,kmax", [(0.08, 5), (0.1, 4), (1 / 11, 4), (0.5, 0), (0.9, 0)])
def test_max_canard_index(mu, kmax):
    assert an.max_canard_index(mu) == kmax


def test_visible_count_limits():
    assert an.visible_count(0.08, 0.0) == 6
    assert an.visible_count(0.08, 10.0) == 0


def test_regime_map_outputs(tmp_path):
    rm = an.regime_map([0.05, 0.1, 0.2], [1e-3, 1e-2, 1e-1], k_curves=3)
    assert rm.counts.shape == (3, 3)
    assert rm.counts[0, 0] == an.visible_count(0.05, 1e-3)
    rm.to_csv(tmp_path / "r.csv")
    rm.to_matrix(tmp_path / "r.matrix")
    rm.boundaries_to_csv(tmp_path / "b.csv")
    m = np.loadtxt(tmp_path / "r.matrix")
    assert m.shape == (4, 4) and m[0, 0] == 3
    assert np.allclose(m[1:, 1:], rm.counts)
    b = np.loadtxt(tmp_path / "b.csv", delimiter=",", skiprows=1)
    assert np.allclose(b[:, 2], an.sigma_k(rm.mu, 1))


def test_count_saos_gate():
    mu = 0.05
    z = np.linspace(-0.9, 0.9, 4001)
    # deviation that turns ten times with amplitude 1e-2 around the weak canard
    xi = 1e-2 * np.cos(10 * np.pi * (z + 0.9) / 1.8)
    states = np.column_stack([xi - z, z * z - mu / 2, z])
    assert an.count_saos(states, mu, 0.0) == 10
    assert an.count_saos(states, mu, sigma=1e-4) == 10
    assert an.count_saos(states, mu, sigma=1e-2) == 0
    with pytest.raises(an.InsufficientData):
        an.count_saos(states[:2], mu)


def test_classify_mmo_short_input():
    assert an.classify_mmo(np.zeros((10, 3)), TWO_LAO_PARAMS).segments == []


def test_km_survival_hand_example():
    t, S = an.km_survival([1, 2, 2, 3], [False, True, False, False])
    assert np.allclose(t, [1, 2, 3])
    assert np.allclose(S, [0.75, 0.5, 0.0])


def test_km_matches_scipy():
    rng = np.random.default_rng(0)
    t = rng.exponential(size=300)
    c = rng.random(300) < 0.3
    ev, S = an.km_survival(t, c)
    res = stats.ecdf(stats.CensoredData(uncensored=t[~c], right=t[c]))
    assert np.allclose(S, res.sf.evaluate(ev))


def _exit_set(z, censored):
    n = len(z)
    loc = np.column_stack([np.zeros(n), np.zeros(n), z])
    reasons = [StopReason.Z_LIMIT if c else StopReason.ESCAPE_EXIT for c in censored]
    return ExitSampleSet(np.arange(n), np.zeros(n), loc, reasons)


def test_exit_scaling_fit_recovers_rate():
    mu, sigma, kappa = 0.05, 1e-3, 2.5
    rng = np.random.default_rng(1)
    X = rng.exponential(1 / kappa, 4000)
    z = np.sqrt(mu + X * mu * abs(np.log(sigma)))
    cens = z > 1.0
    z = np.minimum(z, 1.0)
    fit = an.exit_scaling_fit(_exit_set(z, cens), mu, sigma)
    assert fit.kappa == pytest.approx(kappa, rel=0.1)
    assert fit.r2 > 0.95
    with pytest.raises(an.InsufficientData):
        an.exit_scaling_fit(_exit_set(z[:50], cens[:50]), mu, sigma)


def test_tube_fit_saturation_correction():
    q = np.array([2.0, 2.5, 3.0, 3.5, 4.0, 6.0])
    X = q * q / 2
    P = 1 - np.exp(-40 * np.exp(-0.9 * X))
    fit = an.tube_exit_exponent_fit(q, P)
    assert fit.kappa0 == pytest.approx(0.9, rel=1e-9)
    raw = an.tube_exit_exponent_fit(q, P, corrected=False)
    assert raw.kappa0 < 0.9
    zero = an.tube_exit_exponent_fit([2, 3, 4, 6], [0.9, 0.5, 0.0, 0.0], n_paths=1000)
    assert zero.kappa0 is None and zero.lower_bound == pytest.approx(np.log(1000) / 8)
    with pytest.raises(an.InsufficientData):
        an.tube_exit_exponent_fit([2, 3], [0.5, 0.1])


def test_escape_density_modes():
    rng = np.random.default_rng(2)
    one = rng.normal([0.0, 0.0], [0.01, 0.02], size=(2000, 2))
    assert an.escape_density(one).n_modes == 1
    two = np.vstack([one, rng.normal([0.05, 0.1], [0.01, 0.02], size=(2000, 2))])
    d = an.escape_density(two, reference=(0.0, 0.0))
    assert d.n_modes == 2
    assert abs(d.hist.sum() - 1) < 1e-12
    assert d.summary()["reference"] == [0.0, 0.0]
    with pytest.raises(an.InsufficientData):
        an.escape_density(one[:100])


def test_escape_density_degenerate_inputs():
    point = np.tile([0.01, 0.05], (600, 1))
    d = an.escape_density(point)
    assert d.n_modes == 1 and np.allclose(d.modes[0][:2], [0.01, 0.05])
    rng = np.random.default_rng(4)
    t = np.concatenate([rng.normal(-1, 0.1, 400), rng.normal(1, 0.1, 400)])
    line = np.column_stack([t, 2 * t])
    assert an.escape_density(line).n_modes == 2
