import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsbmgat.trajectory import (NO_NEIGHBOR, ROLES, BlockMax, TrajectorySample, VehicleState,
                                block_maxima, compute_mrd, danger_series, filter_and_pool,
                                identify_neighbors, read_csv, rect_corners, rect_distance,
                                write_csv)


def veh(vid, x, y=0.0, lane=2, heading=0.0, length=4.0, width=2.0, t=0.0, speed=10.0):
    return VehicleState(vid, t, x, y, speed, 0.0, heading, lane, length, width)


def boundary_points(v, n=400):
    """Dense samples along a rectangle's boundary."""
    c = rect_corners(v.x, v.y, v.heading, v.length, v.width)
    pts = []
    for i in range(4):
        a, b = c[i], c[(i + 1) % 4]
        s = np.linspace(0, 1, n, endpoint=False)[:, None]
        pts.append(a + s * (b - a))
    return np.vstack(pts)


def oracle_gap(a, b):
    pa, pb = boundary_points(a), boundary_points(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return d.min()


# --- vehicle state -----------------------------------------------------------------

def test_vehicle_state_validation():
    with pytest.raises(ValueError):
        veh(1, 0.0, speed=-1.0)
    with pytest.raises(ValueError):
        veh(1, 0.0, length=0.0)


# --- neighbors ---------------------------------------------------------------------

def test_alone_has_no_neighbors():
    assert identify_neighbors([veh(0, 0.0)], 0) == {}


def test_leftmost_lane_has_no_left_roles():
    frame = [veh(0, 0.0, lane=1), veh(1, 10.0, lane=1), veh(2, 5.0, lane=2), veh(3, -5.0, lane=2)]
    nb = identify_neighbors(frame, 0)
    assert "lead_left" not in nb and "lag_left" not in nb
    assert nb["lead_same"] == 1 and nb["lead_right"] == 2 and nb["lag_right"] == 3


def test_one_vehicle_per_role():
    frame = [veh(0, 0.0)]
    placed = {"lead_left": (1, 20.0, 1), "lead_same": (2, 15.0, 2), "lead_right": (3, 12.0, 3),
              "lag_left": (4, -9.0, 1), "lag_same": (5, -18.0, 2), "lag_right": (6, -7.0, 3)}
    for vid, x, lane in placed.values():
        frame.append(veh(vid, x, lane=lane))
    # distractors further away in each lane
    frame += [veh(10 + i, 60.0 * s, lane=lane) for i, (s, lane) in
              enumerate([(1, 1), (1, 2), (1, 3), (-1, 1), (-1, 2), (-1, 3)])]
    nb = identify_neighbors(frame, 0)
    assert {r: nb[r] for r in ROLES} == {r: v[0] for r, v in placed.items()}


def test_neighbors_brute_force_and_permutation_invariance():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = 15
        frame = [veh(i, rng.uniform(-80, 80), lane=int(rng.integers(1, 4))) for i in range(n)]
        nb = identify_neighbors(frame, 0)
        subj = frame[0]
        for side, dl in (("left", -1), ("same", 0), ("right", 1)):
            lane = subj.lane + dl
            ahead = sorted((v.x - subj.x, v.vehicle_id) for v in frame[1:]
                           if v.lane == lane and v.x > subj.x)
            behind = sorted((subj.x - v.x, v.vehicle_id) for v in frame[1:]
                            if v.lane == lane and v.x <= subj.x)
            assert nb.get(f"lead_{side}") == (ahead[0][1] if ahead else None)
            assert nb.get(f"lag_{side}") == (behind[0][1] if behind else None)
        perm = [frame[i] for i in rng.permutation(n)]
        assert identify_neighbors(perm, 0) == nb
        assert len(set(nb.values())) == len(nb)


def test_neighbor_tie_goes_to_smaller_id():
    frame = [veh(0, 0.0), veh(7, 10.0, lane=3), veh(4, 10.0, lane=3)]
    assert identify_neighbors(frame, 0)["lead_right"] == 4


def test_missing_subject():
    with pytest.raises(ValueError, match="subject not in frame"):
        identify_neighbors([veh(1, 0.0)], 0)


# --- MRD ------------------------------------------------------------------------------

def test_mrd_examples():
    a = veh(0, 0.0)
    assert compute_mrd(a, [veh(1, 10.0)]) == pytest.approx(6.0, abs=1e-12)
    assert compute_mrd(a, [veh(1, 0.0)]) == 0.0
    assert compute_mrd(a, []) == NO_NEIGHBOR
    assert math.isinf(NO_NEIGHBOR)


def test_mrd_takes_minimum_over_neighbors():
    a = veh(0, 0.0)
    assert compute_mrd(a, [veh(1, 10.0), veh(2, 0.0, y=3.0)]) == pytest.approx(1.0)


def test_mrd_matches_boundary_oracle():
    rng = np.random.default_rng(1)
    for _ in range(40):
        a = veh(0, 0.0, y=0.0, heading=rng.uniform(-0.5, 0.5), length=rng.uniform(3.5, 5.5),
                width=rng.uniform(1.5, 2.2))
        b = veh(1, rng.uniform(-10, 10), y=rng.uniform(-5, 5), heading=rng.uniform(-0.5, 0.5),
                length=rng.uniform(3.5, 5.5), width=rng.uniform(1.5, 2.2))
        got = compute_mrd(a, [b])
        if got == 0.0:
            continue
        # boundary sampling can only overestimate the true gap
        assert got <= oracle_gap(a, b) + 1e-12
        assert got == pytest.approx(oracle_gap(a, b), abs=0.02)


def test_mrd_symmetric_and_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = veh(0, rng.uniform(-5, 5), y=rng.uniform(-3, 3), heading=rng.uniform(-1, 1))
        b = veh(1, rng.uniform(-5, 5), y=rng.uniform(-3, 3), heading=rng.uniform(-1, 1))
        d1, d2 = compute_mrd(a, [b]), compute_mrd(b, [a])
        assert d1 >= 0 and d1 == pytest.approx(d2, abs=1e-12)


def test_rect_distance_detects_rotated_overlap():
    a = rect_corners(0.0, 0.0, 0.0, 4.0, 2.0)
    b = rect_corners(2.5, 1.2, math.pi / 4, 4.0, 2.0)
    assert rect_distance(a, b) == 0.0


# --- danger series and block maxima -----------------------------------------------------

def crash_sample(gaps, tau=0.1):
    """Crash sample whose subject-leader gap at tick -n..0 follows ``gaps``."""
    n = len(gaps) - 1
    frames = {}
    for i, g in enumerate(gaps):
        k = i - n
        frames[k] = [veh(0, 0.0, t=k * tau), veh(1, 4.0 + g, t=k * tau)]
    return TrajectorySample("c", "crash", 0, frames, crash_time=0.0)


def test_danger_series_grid_and_values():
    s = crash_sample([0.5] * 5)
    t, x = danger_series(s, 0.4)
    np.testing.assert_allclose(t, [-0.4, -0.3, -0.2, -0.1, 0.0])
    np.testing.assert_allclose(x, -0.5)


def test_danger_series_crash_reaches_zero():
    s = crash_sample([2.0, 1.5, 1.0, 0.5, 0.0])
    t, x = danger_series(s, 0.4)
    assert x.max() == 0.0 and t[np.argmax(x)] == 0.0


def test_danger_series_requires_coverage():
    with pytest.raises(ValueError):
        danger_series(crash_sample([1.0] * 3), 0.4)


def test_danger_series_no_neighbor_sentinel():
    s = crash_sample([1.0] * 3)
    s.frames[-1] = [veh(0, 0.0)]
    _, x = danger_series(s, 0.2)
    assert x[1] == -np.inf


def test_block_maxima_example():
    t = np.arange(6) * 0.1
    out = block_maxima(t, [3, 1, 4, 1, 5, 9], 0.2)
    assert [(round(b.t, 1), b.z) for b in out] == [(0.0, 3), (0.2, 4), (0.5, 9)]


def test_block_maxima_ties_and_trailing():
    out = block_maxima(np.arange(5) * 0.1, [2.0] * 5, 0.2)
    assert [round(b.t, 1) for b in out] == [0.0, 0.2]


def test_block_maxima_short_and_bad_width():
    assert block_maxima([0.0], [1.0], 0.2) == []
    with pytest.raises(ValueError):
        block_maxima(np.arange(4) * 0.1, np.zeros(4), 0.1)
    with pytest.raises(ValueError):
        block_maxima(np.arange(4) * 0.1, np.zeros(4), 0.25)


def test_block_maxima_skips_sentinels():
    x = [-np.inf, -2.0, -np.inf, -np.inf, -1.0, -3.0]
    out = block_maxima(np.arange(6) * 0.1, x, 0.2)
    assert [(b.block_index, b.z) for b in out] == [(0, -2.0), (2, -1.0)]


@settings(max_examples=200, deadline=None)
@given(x=st.lists(st.floats(-100, 0, allow_nan=False), min_size=0, max_size=1000),
       m=st.integers(2, 7))
def test_block_maxima_brute_force(x, m):
    t = np.arange(len(x)) * 0.1
    out = block_maxima(t, x, m * 0.1)
    expected = []
    for k in range(len(x) // m):
        blk = x[k * m:(k + 1) * m]
        j = blk.index(max(blk))
        expected.append(BlockMax(float(t[k * m + j]), blk[j], k))
    assert out == expected


# --- filtering --------------------------------------------------------------------------

def test_filter_example():
    maxima = {"a": [BlockMax(0.0, -0.3, 0), BlockMax(0.2, -1.5, 1)],
              "b": [BlockMax(0.0, -0.9, 0)]}
    ev = filter_and_pool(maxima, 1.0)
    assert [(e.sample_id, e.z) for e in ev] == [("a", -0.3), ("b", -0.9)]
    assert all(-1.0 < e.z <= 0 for e in ev)


def test_filter_empty_and_validation():
    assert filter_and_pool({"a": [BlockMax(0.0, -2.0, 0)]}, 1.0) == []
    with pytest.raises(ValueError):
        filter_and_pool({}, 0.0)


def test_filter_none_keeps_finite():
    maxima = {"a": [BlockMax(0.0, -20.0, 0), BlockMax(0.2, -np.inf, 1)]}
    assert [e.z for e in filter_and_pool(maxima, None)] == [-20.0]


# --- CSV --------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    s = crash_sample([1.0, 0.5, 0.0])
    p = tmp_path / "traj.csv"
    write_csv([s], p, comment="config_hash=abc seed=1")
    assert p.read_text().startswith("# config_hash=abc seed=1\n")
    back = read_csv(p)
    assert len(back) == 1 and back[0].sample_id == "c" and back[0].label == "crash"
    assert back[0].ticks == s.ticks
    assert back[0].frames[0] == s.frames[0]


def test_csv_rejects_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("sample_id,label\nc,crash\n")
    with pytest.raises(ValueError):
        read_csv(p)
