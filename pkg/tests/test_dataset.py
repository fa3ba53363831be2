import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamloc.dataset import (
    Frame,
    Manifest,
    ManifestError,
    Pose,
    compute_kb,
    format_manifest,
    label_metric,
    load_manifest,
    parse_manifest,
    sample_pairs,
    save_manifest,
    subsample_map,
)

# per-room image counts of the first training set; they add up to 7,885
# although the reported total is 8,486
TRAINING_SET_1 = {
    "1PO-A": 518, "2PO1-A": 694, "2PO2-A": 428, "CR-A": 3258, "KT-A": 674,
    "LO-A": 395, "PA-A": 804, "ST-A": 495, "TL-A": 619,
}


def make_manifest(room_counts, seed=0, k_b=None):
    rng = np.random.default_rng(seed)
    frames = []
    for r, (room, n) in enumerate(room_counts.items()):
        xy = rng.uniform(0, 4, size=(n, 2)) + [5.0 * r, 0.0]
        for k, (x, y) in enumerate(xy):
            frames.append(Frame(f"{room}/{k:05d}.png", Pose(x, y, 0.0), room))
    return Manifest(frames, k_b=k_b)


def brute_force_kb(points):
    best = 0.0
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            best = max(best, math.hypot(points[i][0] - points[j][0], points[i][1] - points[j][1]))
    return best


def frames_at(points, room="A"):
    return [Frame(f"{k}.png", Pose(x, y), room) for k, (x, y) in enumerate(points)]


# --- K_b --------------------------------------------------------------------


def test_kb_small_cases():
    assert compute_kb(frames_at([(1.0, 2.0)])) == 0.0
    assert compute_kb(frames_at([(0.0, 0.0), (3.0, 4.0)])) == 5.0
    with pytest.raises(ValueError):
        compute_kb([])


@pytest.mark.parametrize("n", [3, 10, 250, 2000])
def test_kb_matches_brute_force(n):
    pts = np.random.default_rng(n).normal(size=(n, 2)) * [10, 3]
    pts = [tuple(p) for p in pts]
    assert compute_kb(frames_at(pts)) == pytest.approx(brute_force_kb(pts), abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(-20, 20).map(float), st.integers(-20, 20).map(float)),
        min_size=1,
        max_size=30,
    )
)
def test_kb_degenerate_sets(points):
    # integer grids produce collinear sets and duplicates
    assert compute_kb(frames_at(points)) == pytest.approx(brute_force_kb(points), abs=1e-9)


def test_kb_collinear():
    pts = [(float(k), 2.0 * k) for k in range(10)]
    assert compute_kb(frames_at(pts)) == pytest.approx(math.hypot(9, 18))


@pytest.mark.skipif("SIAMLOC_COLD_MANIFEST" not in os.environ, reason="COLD-Freiburg manifest not supplied")
def test_kb_cold_freiburg():
    m = load_manifest(os.environ["SIAMLOC_COLD_MANIFEST"])
    assert compute_kb(m.frames) == pytest.approx(18.99, abs=0.05)


# --- labels -----------------------------------------------------------------


@pytest.mark.parametrize(
    "dist, expected",
    [(0.33, 0.017), (12.82, 0.675), (2.48, 0.131)],
)
def test_metric_label_reference_pairs(dist, expected):
    y = label_metric(Pose(0.0, 0.0), Pose(dist, 0.0), "CR-A", "CR-A", 18.99)
    assert y == pytest.approx(expected, abs=1e-3)


def test_metric_label_other_room_is_one():
    assert label_metric(Pose(0, 0), Pose(0.1, 0), "CR-A", "KT-A", 18.99) == 1.0
    assert label_metric(Pose(0, 0), Pose(0, 0), "CR-A", "KT-A", 18.99) == 1.0


def test_metric_label_clipped_and_validated():
    assert label_metric(Pose(0, 0), Pose(30, 0), "A", "A", 18.99) == 1.0
    with pytest.raises(ValueError):
        label_metric(Pose(0, 0), Pose(1, 0), "A", "A", 0.0)


coords = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(coords, coords, coords, coords, st.booleans(), st.floats(0.1, 100))
def test_metric_label_properties(x0, y0, x1, y1, same, k_b):
    p, q = Pose(x0, y0), Pose(x1, y1)
    ra, rb = "A", ("A" if same else "B")
    y = label_metric(p, q, ra, rb, k_b)
    assert 0.0 <= y <= 1.0
    assert y == label_metric(q, p, rb, ra, k_b)
    if not same:
        assert y == 1.0
    elif (x0, y0) == (x1, y1):
        assert y == 0.0


# --- pair sampling ----------------------------------------------------------


def test_sample_pairs_reference_split():
    m = make_manifest(TRAINING_SET_1)
    pairs = sample_pairs(m, 60928, 0.05, "room_binary", seed=0)
    same = sum(1 for p in pairs if m[p.i].room == m[p.j].room)
    assert (same, len(pairs) - same) == (3046, 57882)
    assert all(p.label == (0.0 if m[p.i].room == m[p.j].room else 1.0) for p in pairs)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("ratio", [0.05, 0.1, 0.25, 0.4, 0.5, 0.77])
def test_sample_pairs_exact_counts(seed, ratio):
    m = make_manifest({"a": 5, "b": 7, "c": 2})
    n = 97
    pairs = sample_pairs(m, n, ratio, "metric", seed=seed)
    same = [p for p in pairs if m[p.i].room == m[p.j].room]
    assert len(pairs) == n
    assert len(same) == int(math.floor(n * ratio + 0.5))
    assert all(p.i != p.j for p in pairs)
    for p in pairs:
        expected = label_metric(m[p.i].pose, m[p.j].pose, m[p.i].room, m[p.j].room, m.k_b)
        assert p.label == expected


def test_sample_pairs_half_split_and_determinism():
    m = make_manifest({"a": 5, "b": 5})
    pairs = sample_pairs(m, 10, 0.5, seed=3)
    assert sum(1 for p in pairs if m[p.i].room == m[p.j].room) == 5
    assert pairs == sample_pairs(m, 10, 0.5, seed=3)


def test_sample_pairs_impossible_strata():
    single_room = make_manifest({"a": 10})
    with pytest.raises(ValueError):
        sample_pairs(single_room, 10, 0.5)
    singletons = make_manifest({"a": 1, "b": 1})
    with pytest.raises(ValueError):
        sample_pairs(singletons, 10, 0.5)
    with pytest.raises(ValueError):
        sample_pairs(single_room, 10, 0.5, task="bogus")


# --- map subsampling --------------------------------------------------------


def test_subsample_map():
    m = make_manifest({"a": 40, "b": 60})
    assert subsample_map(m, 100).frames == m.frames
    assert subsample_map(m, 1).frames == (m[0],)
    sub = subsample_map(m, 7)
    expected = [int(math.floor(k * 99 / 6 + 0.5)) for k in range(7)]
    assert sub.frames == tuple(m[i] for i in expected)
    with pytest.raises(ValueError):
        subsample_map(m, 0)
    with pytest.raises(ValueError):
        subsample_map(m, 101)


def test_subsample_map_reference_size():
    m = make_manifest({"cloudy": 2841})
    assert len(subsample_map(m, 556)) == 556


# --- manifest files ---------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    m = make_manifest({"a": 3, "b": 2})
    save_manifest(m, tmp_path / "m.txt")
    back = load_manifest(tmp_path / "m.txt")
    assert back.frames == m.frames
    assert back.k_b == m.k_b
    assert format_manifest(back) == format_manifest(m)


def test_manifest_single_frame():
    m = parse_manifest("image=a.png\tx=1\ty=2\ttheta=0\troom=CR-A\tcondition=night\tsequence=s\n")
    assert len(m) == 1 and m.k_b == 0.0
    assert m[0].condition == "night"


def test_manifest_kb_header_is_kept():
    text = "kb=18.99\nimage=a.png\tx=0\ty=0\ttheta=0\troom=A\tcondition=cloudy\tsequence=s\n"
    assert parse_manifest(text).k_b == 18.99


def test_manifest_reference_size(tmp_path):
    counts = dict(TRAINING_SET_1, **{"CR-A": TRAINING_SET_1["CR-A"] + 8486 - 7885})
    m = make_manifest(counts)
    save_manifest(m, tmp_path / "train1.txt")
    assert len(load_manifest(tmp_path / "train1.txt")) == 8486


def test_manifest_errors_name_the_line():
    good = "image=a.png\tx=0\ty=0\ttheta=0\troom=A\tcondition=cloudy\tsequence=s"
    bad = "image=b.png\tx=zero\ty=0\ttheta=0\troom=A\tcondition=cloudy\tsequence=s"
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest(good + "\n" + bad + "\n")
    with pytest.raises(ManifestError, match="line 1"):
        parse_manifest("image=a.png\tx=0\n")
    with pytest.raises(ManifestError, match="line 1"):
        parse_manifest(good.replace("cloudy", "foggy"))
    with pytest.raises(ValueError):
        parse_manifest("\n# only comments\n")


def test_pose_theta_wrapped():
    assert Pose(0, 0, math.pi).theta == pytest.approx(-math.pi)
    assert -math.pi <= Pose(0, 0, 7.0).theta < math.pi
    with pytest.raises(ValueError):
        Pose(float("nan"), 0)
