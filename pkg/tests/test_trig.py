import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from geoproof.geo import GeoPoint, PlanarPoint, bearing, destination, distance
from geoproof.trig import (AllExcluded, EmptyChallengerSet, ProvingConfig, bound_matrix,
                           brute_force_region,
                           cell_upper_bounds, directional_uncertainty, excluded_count,
                           filtered_bounds, grid_slack, prove, region_boundary, theta_grid)

O = PlanarPoint(0.0, 0.0)
coords = st.floats(-1, 1)
planar = st.builds(PlanarPoint, coords, coords)


def ray_oracle(claimed, centre, radius, theta, reach=10.0, steps=200_001):
    """Farthest sampled point along the ray that stays inside the disc."""
    r = np.linspace(0.0, reach, steps)
    x = claimed.x + r * math.sin(theta)
    y = claimed.y + r * math.cos(theta)
    inside = np.hypot(x - centre.x, y - centre.y) <= radius
    return float(r[inside].max()) if inside.any() else 0.0


@pytest.mark.parametrize("offset,expected", [(0.0, 2.0), (math.pi, 8.0), (math.pi / 2, 4.0)])
def test_directional_uncertainty_known_values(offset, expected):
    assert directional_uncertainty(5.0, 3.0, offset, 0.0) == pytest.approx(expected)


def test_ray_missing_the_disc_is_zero():
    assert directional_uncertainty(1.0, 3.0, math.pi / 2, 0.0) == 0.0
    # geometric check: challenger 3 away to the west, radius 1, walking north
    assert ray_oracle(O, PlanarPoint(-3, 0), 1.0, 0.0) == 0.0


@given(planar, planar, st.floats(0.05, 2.0), st.floats(0, 2 * math.pi))
def test_directional_bound_matches_ray_oracle(claimed, centre, radius, theta):
    d_tilde = distance(claimed, centre)
    assume(d_tilde > 1e-3)
    gamma = bearing(claimed, centre) + math.pi
    got = directional_uncertainty(radius, d_tilde, gamma, theta)
    want = ray_oracle(claimed, centre, radius, theta, reach=5.0)
    assert got == pytest.approx(want, abs=1e-4) or (want == 0.0 and got < 2e-2)


def test_order_statistic_discards_smallest():
    # challengers at the claimed point give a flat bound equal to d_hat
    obs = [(O, v) for v in (0.0, 3.0, 4.0, 5.0, 6.0)]
    prof = prove(O, obs, ProvingConfig(beta=0.2, grid_size=8))
    assert prof.excluded_count == 1
    assert np.allclose(prof.r_star_theta, 3.0)
    assert prof.r_star == 3.0


def test_single_circle_through_claim():
    c = PlanarPoint(0.0, 2.0)  # due north
    prof = prove(O, [(c, 2.0)], ProvingConfig(grid_size=360))
    assert prof.r_star_theta[0] == pytest.approx(4.0)     # toward the challenger
    assert prof.r_star_theta[180] == pytest.approx(0.0, abs=1e-12)   # away from it
    assert prof.r_star == pytest.approx(4.0)
    assert prof.argmax_theta == pytest.approx(0.0)


def test_empty_and_all_excluded():
    with pytest.raises(EmptyChallengerSet):
        prove(O, [])
    with pytest.raises(AllExcluded):
        filtered_bounds(O, [(O, 1.0)], theta_grid(8), beta=1.0)
    with pytest.raises(ValueError):
        ProvingConfig(beta=0.5)
    with pytest.raises(ValueError):
        ProvingConfig(grid_size=3)


def test_excluded_count_uses_floor_with_guard():
    assert excluded_count(0.29, 100) == 29
    assert excluded_count(0.3, 10) == 3
    assert excluded_count(0.19, 10) == 1


def test_percentile_exclusion_drops_largest_directions():
    c = PlanarPoint(0.0, 2.0)
    full = prove(O, [(c, 2.0)], ProvingConfig(grid_size=360))
    cut = prove(O, [(c, 2.0)], ProvingConfig(grid_size=360, percentile_exclusion=0.1))
    assert cut.kept.sum() == 360 - 36
    assert cut.r_star == pytest.approx(np.sort(full.r_star_theta)[-37])
    assert cut.r_star_theta.tolist() == full.r_star_theta.tolist()


def test_angular_exclusion_removes_arc_around_peak():
    c = PlanarPoint(0.0, 2.0)
    cut = prove(O, [(c, 2.0)], ProvingConfig(grid_size=360, angular_exclusion=math.radians(60)))
    assert cut.kept.sum() == 360 - 61
    # first surviving direction is 31 degrees off the peak
    assert cut.r_star == pytest.approx(directional_uncertainty(2.0, 2.0, math.pi, math.radians(31)))


def test_config_round_trip():
    cfg = ProvingConfig(beta=0.2, grid_size=90, percentile_exclusion=0.05, angular_exclusion=1.0)
    assert ProvingConfig.from_dict(cfg.to_dict()) == cfg


def test_region_boundary_degenerate_and_circle():
    g = GeoPoint(45.0, 7.0)
    zero = prove(g, [(g, 0.0)], ProvingConfig(grid_size=12))
    pts = region_boundary(zero)
    assert len(pts) == 12
    assert all(distance(p, g) < 1e-6 for p in pts)

    flat = prove(g, [(g, 300.0)], ProvingConfig(grid_size=36))
    ring = region_boundary(flat)
    assert len(ring) == 36
    assert all(abs(distance(p, g) - 300.0) < 1e-6 for p in ring)


def test_brute_force_single_disc_area():
    step = 0.02
    pts = brute_force_region([(PlanarPoint(0.3, -0.2), 1.0)], 1, step)
    assert len(pts) == pytest.approx(math.pi / step ** 2, rel=0.05)


def test_brute_force_disjoint_empty():
    pts = brute_force_region([(PlanarPoint(0, 0), 1.0), (PlanarPoint(5, 0), 1.0)], 2, 0.05)
    assert pts.shape == (0, 2)


def test_brute_force_region_inside_profile():
    # three overlapping unit circles around the origin
    centres = [PlanarPoint(0.5, 0.0), PlanarPoint(-0.3, 0.4), PlanarPoint(-0.2, -0.5)]
    obs = [(c, 1.0) for c in centres]
    prof = prove(O, obs, ProvingConfig(grid_size=720))
    step = 0.01
    pts = brute_force_region(obs, 3, step)
    ang = np.mod(np.arctan2(pts[:, 0], pts[:, 1]), 2 * np.pi)
    idx = np.rint(ang / (2 * np.pi / 720)).astype(int) % 720
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert np.all(r <= prof.r_star_theta[idx] + step + 0.01)
    # and every boundary vertex pulled slightly inward is covered by all circles
    for b in region_boundary(prof):
        inner = PlanarPoint(b.x * 0.99, b.y * 0.99)
        assert all(distance(inner, c) <= 1.0 + 1e-9 for c in centres)


world = st.lists(st.tuples(planar, st.floats(0.0, 1.0)), min_size=1, max_size=12)


@given(world, st.randoms(use_true_random=False))
def test_permutation_invariant(obs, rnd):
    cfg = ProvingConfig(beta=0.25, grid_size=36)
    shuffled = list(obs)
    rnd.shuffle(shuffled)
    assert np.array_equal(prove(O, obs, cfg).r_star_theta, prove(O, shuffled, cfg).r_star_theta)


@given(world)
def test_r_star_non_decreasing_in_beta(obs):
    prev = -1.0
    for beta in (0.0, 0.1, 0.2, 0.3, 0.4, 0.49):
        r = prove(O, obs, ProvingConfig(beta=beta, grid_size=36)).r_star
        assert r >= prev - 1e-12
        prev = r


@given(world, planar)
def test_binding_honest_challenger_never_increases_r_star(obs, c):
    # with beta = 0 an extra disc containing the claim can only shrink the intersection
    before = prove(O, obs, ProvingConfig(grid_size=36))
    after = prove(O, obs + [(c, distance(c, O) + 0.1)], ProvingConfig(grid_size=36))
    assert after.r_star <= before.r_star + 1e-12


@given(st.lists(planar, min_size=2, max_size=15), planar, st.data())
def test_soundness_with_deflating_minority(centres, waldo, data):
    n = len(centres)
    beta = data.draw(st.floats(0.0, 0.49))
    k = excluded_count(beta, n)
    bad = set(data.draw(st.lists(st.integers(0, n - 1), max_size=k, unique=True)))
    obs = []
    for i, c in enumerate(centres):
        if i in bad:
            obs.append((c, data.draw(st.sampled_from([0.0, 20.0]) | st.floats(0.0, 20.0))))
        else:
            obs.append((c, distance(c, waldo) + data.draw(st.floats(0.0, 0.5))))
    claimed = data.draw(planar)
    prof = prove(claimed, obs, ProvingConfig(beta=beta, grid_size=90))
    assert distance(waldo, claimed) <= prof.r_star + grid_slack(prof, obs, beta) + 1e-9


@given(st.lists(st.tuples(planar, st.floats(0.0, 2.0)), min_size=1, max_size=10),
       planar, st.floats(0.0, 0.49))
def test_cell_bounds_dominate_dense_directions(obs, claimed, beta):
    g = 36
    cells = cell_upper_bounds(claimed, obs, g, beta)
    fine = filtered_bounds(claimed, obs, theta_grid(g * 40), beta)
    # each fine direction belongs to the cell of its nearest coarse direction
    owner = ((np.arange(g * 40) + 20) // 40) % g
    assert np.all(fine <= cells[owner] + 1e-9)
    assert np.all(prove(claimed, obs, ProvingConfig(beta=beta, grid_size=g)).r_star_theta
                  <= cells + 1e-12)


def test_completeness_by_tightening():
    rng = np.random.default_rng(5)
    for _ in range(20):
        centres = [PlanarPoint(*rng.uniform(-1, 1, 2)) for _ in range(8)]
        obs = [(c, distance(c, O) + rng.uniform(0, 0.3)) for c in centres]
        cfg = ProvingConfig(beta=0.25, grid_size=360)
        prof = prove(O, obs, cfg)
        j = int(np.argmax(prof.r_star_theta))
        p = destination(O, float(prof.theta_grid[j]), prof.r_star)
        # the challenger pinning the bound in that direction
        col = bound_matrix(O, obs, prof.theta_grid[j:j + 1])[:, 0]
        i = int(np.argsort(col, kind="stable")[prof.excluded_count])
        tight = list(obs)
        tight[i] = (obs[i][0], distance(obs[i][0], p))
        again = prove(O, tight, cfg)
        assert again.r_star_theta[j] == pytest.approx(prof.r_star_theta[j], rel=1e-9)


def test_cell_bounds_keep_tangent_window_on_cell_edge():
    # the only admissible direction (due west) sits exactly on a 90-cell edge
    # and touches the last disc tangentially
    obs = [(PlanarPoint(0.0, 0.0), 0.0)] * 5 + [(PlanarPoint(0.0, 1.0), 1.0)]
    claimed = PlanarPoint(0.5, 0.0)
    prof = prove(claimed, obs, ProvingConfig(beta=0.0, grid_size=90))
    assert prof.r_star == 0.0
    assert prof.r_star + grid_slack(prof, obs, 0.0) >= 0.5 - 1e-12
