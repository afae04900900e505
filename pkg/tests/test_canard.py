import json

import numpy as np
import pytest

from duckhunt.canard import (DegenerateSlices, SIGMA_0, SectionSpec, TwistError,
                             attracting_slice, canard_spacing, canard_trajectory,
                             default_seeds, find_maximal_canards, fit_c0,
                             records_to_csv, repelling_slice, twist_count, weak_point,
                             write_summary)
from duckhunt.model import Frame, SystemParams


def test_default_seeds():
    s = default_seeds(0.08, 50)
    assert s[0] == pytest.approx(1.0) and s[-1] == pytest.approx(12.5)
    assert np.all(np.diff(np.log(s)) > 0)
    assert np.allclose(np.diff(np.log(s)), np.log(12.5) / 49)
    with pytest.raises(ValueError):
        default_seeds(0.08, 0)


def test_section_spec():
    sec = SectionSpec("y", 1.0, -1)
    assert sec.axis == 1 and sec.plane_axes == (0, 2)
    assert SectionSpec("z", 0.3).reflected() == SectionSpec("z", -0.3)
    with pytest.raises(ValueError):
        SectionSpec("w", 0.0)


def test_repelling_slice_two_routes_agree():
    p = SystemParams(mu=0.1)
    seeds = default_seeds(0.1, 12)
    sym = repelling_slice(p, SIGMA_0, seeds)
    back = repelling_slice(p, SIGMA_0, seeds, method="backward")
    assert np.allclose(sym.points, back.points, atol=1e-7)


def test_slice_rejects_original_frame():
    with pytest.raises(ValueError):
        attracting_slice(SystemParams(mu=0.1, frame=Frame.ORIGINAL))


def test_identical_slices_are_degenerate():
    p = SystemParams(mu=0.1)
    seeds = default_seeds(0.1, 8)
    att = attracting_slice(p, SIGMA_0, seeds)
    with pytest.raises(DegenerateSlices):
        find_maximal_canards(att, att)


def test_weak_point():
    assert np.allclose(weak_point(SIGMA_0, 0.08), [0.0, -0.04, 0.0])
    with pytest.raises(ValueError):
        weak_point(SectionSpec("x", 0.0), 0.08)


def test_strong_canard_is_k0(hunt_008):
    params, att, rep, recs = hunt_008
    strong = recs[0]
    assert strong.k == 0
    # the strong canard meets z = 0 at (0, -1/2)
    assert np.allclose(strong.point[:2], [0.0, -0.5], atol=1e-6)
    assert strong.dist_weak == pytest.approx(0.5 - params.mu / 2, abs=1e-6)
    assert strong.twists == 1


def test_census_invariants(hunt_008):
    _, _, _, recs = hunt_008
    good = [r for r in recs if r.status == "resolved"]
    d = [r.dist_weak for r in good]
    assert all(x >= 0 for x in d)
    assert all(a > b for a, b in zip(d, d[1:]))
    assert all(r.twists == 2 * r.k + 1 for r in good)


def test_maximal_canards_are_symmetric(hunt_008):
    # a maximal canard crosses z = 0 on the symmetry line x = 0
    _, _, _, recs = hunt_008
    for r in recs:
        if r.status == "resolved":
            assert abs(r.point[0]) < 1e-6


def test_twist_count_needs_fold_crossing(hunt_008):
    params, _, _, recs = hunt_008
    tr = canard_trajectory(recs[1].seed_att, params, 2001)
    half = tr[: len(tr) // 2 - 5, 1:]
    with pytest.raises(TwistError):
        twist_count(half, params.mu)
    # eleven half turns cannot be resolved from a dozen samples
    coarse = canard_trajectory(recs[5].seed_att, params, 2001)[::300, 1:]
    with pytest.raises(TwistError):
        twist_count(coarse, params.mu)


def test_fit_c0_recovers_synthetic_law():
    mu = 0.1
    k = np.arange(1, 6)
    d = 0.7 * np.exp(-0.9 * (2 * k + 1) ** 2 * mu)
    c0, icpt = fit_c0(k, d, mu)
    assert c0 == pytest.approx(0.9) and icpt == pytest.approx(np.log(0.7))


def test_spacing_on_z_and_y_sections(hunt_008):
    params, _, _, recs = hunt_008
    rep = canard_spacing(recs, params)
    assert 0.5 < rep.c0 < 1.5
    sec = SectionSpec("y", 1.0, -1)
    a = canard_spacing(recs, params, sec)
    b = canard_spacing(recs, SystemParams(mu=params.mu, eps=0.0025), sec)
    # blown-up separations do not depend on eps; original-frame ones scale with sqrt(eps)
    assert np.allclose(a.sep_over_sqrt_eps, b.sep_over_sqrt_eps)
    assert np.allclose(a.z_separation / b.z_separation, 2.0)
    assert np.all(a.sep_over_sqrt_eps > 0)


def test_exports(hunt_008, tmp_path):
    params, att, _, recs = hunt_008
    records_to_csv(recs, tmp_path / "c.csv")
    att.to_csv(tmp_path / "a.csv")
    write_summary(recs, params, tmp_path / "s.json", canard_spacing(recs, params))
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0].startswith("k,x,y,z") and len(rows) == len(recs) + 1
    summ = json.loads((tmp_path / "s.json").read_text())
    assert summ["k_detected"] == len(recs) - 1 and "c0" in summ
    data = np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1)
    assert np.allclose(data[:, 1:], att.points)
