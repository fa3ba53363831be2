import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from siamloc import augment as A
from siamloc.augment import LocalEffectSpec
from siamloc.dataset import Frame, Pose, load_manifest
from siamloc.imaging import rotation_shift, save_panorama


def const(v, shape=(32, 96)):
    return np.full((*shape, 3), v, dtype=np.uint8)


def panorama_filter_oracle(img, mask):
    """Reference: pad (edge rows, wrapped columns) and run scipy's 2-D correlation."""
    r = mask.shape[0] // 2
    out = np.empty(img.shape, dtype=np.int64)
    for c in range(3):
        ch = img[..., c].astype(np.int64)
        ch = np.pad(ch, ((r, r), (0, 0)), mode="edge")
        ch = np.pad(ch, ((0, 0), (r, r)), mode="wrap")
        out[..., c] = correlate2d(ch, mask, mode="valid")
    return out


# --- local effects --------------------------------------------------------


def test_local_effect_center_value():
    spec = LocalEffectSpec("circle", "brighten", (16, 48), 20, peak=160)
    out = A.apply_local_effect(const(50), spec)
    assert out[16, 48, 0] == 210  # 50 + 160
    out = A.apply_local_effect(const(200), spec)
    assert out[16, 48, 0] == 255  # clipped


def test_local_effect_far_pixel_unchanged(random_image):
    spec = LocalEffectSpec("square", "darken", (10, 10), 15, peak=100)
    out = A.apply_local_effect(random_image, spec)
    np.testing.assert_array_equal(out[:, 40:80], random_image[:, 40:80])


def test_local_effect_boundary_reaches_floor():
    spec = LocalEffectSpec("circle", "brighten", (50, 100), 40, peak=160)
    delta = A.local_effect_delta(spec, 101, 200)
    assert delta[50, 120] == A.FLOOR  # exactly on the circle of radius 20
    assert delta[50, 121] == 0
    assert delta[50, 100] == 160


def test_local_effect_wraps_horizontally():
    spec = LocalEffectSpec("circle", "brighten", (16, 0), 20, peak=100)
    delta = A.local_effect_delta(spec, 32, 96)
    assert delta[16, 95] > 0 and delta[16, 1] > 0
    assert delta[16, 95] == delta[16, 1]


def test_trapezoid_is_narrower_on_top():
    spec = LocalEffectSpec("trapezoid", "brighten", (50, 50), 40, peak=100)
    inside = A.local_effect_delta(spec, 101, 101) != 0
    top_width = inside[31].sum()
    bottom_width = inside[69].sum()
    assert top_width < bottom_width
    assert inside[50, 50]


def test_local_effect_rejects_bad_specs():
    with pytest.raises(ValueError):
        LocalEffectSpec("circle", "brighten", (0, 0), 14)
    with pytest.raises(ValueError):
        LocalEffectSpec("circle", "brighten", (0, 0), 20, peak=120)
    with pytest.raises(ValueError):
        LocalEffectSpec("hexagon", "brighten", (0, 0), 20)
    with pytest.raises(ValueError):
        A.apply_local_effect(const(0), LocalEffectSpec("circle", "brighten", (40, 5), 20))


local_specs = st.builds(
    LocalEffectSpec,
    shape=st.sampled_from(A.SHAPES),
    polarity=st.sampled_from(A.POLARITIES),
    center=st.tuples(st.integers(0, 47), st.integers(0, 127)),
    size=st.integers(A.MIN_SIZE, A.MAX_SIZE),
    peak=st.sampled_from(A.PEAKS),
)


@settings(max_examples=60, deadline=None)
@given(spec=local_specs)
def test_local_effect_locality_and_range(spec):
    img = np.full((48, 128, 3), 128, dtype=np.uint8)
    out = A.apply_local_effect(img, spec)
    delta = A.local_effect_delta(spec, 48, 128)
    changed = np.any(out != img, axis=2)
    assert not np.any(changed & (delta == 0))
    np.testing.assert_array_equal(changed, delta != 0)
    mags = np.abs(delta[delta != 0])
    assert mags.min() >= A.FLOOR and mags.max() <= spec.peak


@settings(max_examples=30, deadline=None)
@given(spec=local_specs, angle=st.floats(0, 2 * np.pi))
def test_local_effect_attenuation_monotone_along_rays(spec, angle):
    h, w = 200, 300
    spec = LocalEffectSpec(spec.shape, spec.polarity, (100, 150), spec.size, spec.peak)
    delta = np.abs(A.local_effect_delta(spec, h, w))
    radii = np.arange(0, spec.size + 2, 0.25)
    rows = np.rint(100 + radii * np.sin(angle)).astype(int)
    cols = np.rint(150 + radii * np.cos(angle)).astype(int)
    # rounding onto the pixel grid can bend the ray, so compare via the gauge itself
    g = A._gauge(spec.shape, spec.size, rows - 100.0, cols - 150.0)
    order = np.argsort(g, kind="stable")
    assert np.all(np.diff(delta[rows, cols][order]) <= 0)


def test_circle_attenuation_monotone_in_distance():
    spec = LocalEffectSpec("circle", "darken", (60, 60), 40, peak=160)
    delta = np.abs(A.local_effect_delta(spec, 121, 121))
    rr, cc = np.mgrid[0:121, 0:121]
    dist = np.hypot(rr - 60, cc - 60).ravel()
    order = np.argsort(dist, kind="stable")
    assert np.all(np.diff(delta.ravel()[order]) <= 0)


# --- global brightness ----------------------------------------------------


def test_global_brightness_values():
    img = np.array([[[100, 250, 20]]], dtype=np.uint8)
    assert A.apply_global_brightness(img, 35, "+")[0, 0, 0] == 135
    assert A.apply_global_brightness(img, 35, "+")[0, 0, 1] == 255
    assert A.apply_global_brightness(img, 40, "-")[0, 0, 2] == 0


def test_global_brightness_range():
    with pytest.raises(ValueError):
        A.apply_global_brightness(const(0), 30, "+")
    with pytest.raises(ValueError):
        A.apply_global_brightness(const(0), 80, "-")


# --- convolutions ---------------------------------------------------------


@pytest.mark.parametrize("v", [0, 1, 64, 200, 255])
def test_filters_fix_constant_images(v):
    img = const(v)
    np.testing.assert_array_equal(A.sharpen(img), img)
    np.testing.assert_array_equal(A.blur(img), img)


def test_sharpen_impulse_clips():
    img = const(0)
    img[16, 48] = 255
    out = A.sharpen(img)
    assert out[16, 48, 0] == 255
    assert out[15, 48, 0] == 0  # -255 clipped


def test_sharpen_hand_example():
    img = const(100)
    img[16, 48] = 120
    # 5*120 - 4*100
    assert A.sharpen(img)[16, 48, 0] == 200


def test_sharpen_matches_reference_filter(random_image):
    expected = np.clip(panorama_filter_oracle(random_image, A.SHARPEN_MASK), 0, 255)
    np.testing.assert_array_equal(A.sharpen(random_image), expected)


def test_blur_impulse():
    img = const(0)
    img[16, 48] = 250
    out = A.blur(img)[..., 0]
    assert np.all(out[14:19, 46:51] == 10)  # 250 / 25
    assert out.sum() == 250


def test_blur_checkerboard():
    rr, cc = np.mgrid[0:32, 0:96]
    board = ((rr + cc) % 2) * 255
    img = np.repeat(board[..., None], 3, axis=2).astype(np.uint8)
    out = A.blur(img)[..., 0]
    # a 5x5 window holds 13 lit pixels when its center is lit, 12 otherwise
    ones_lit = 13 * 255 / 25  # 132.6
    ones_dark = 12 * 255 / 25  # 122.4
    assert out[16, 49] == int(np.floor(ones_lit + 0.5)) == 133
    assert out[16, 48] == int(np.floor(ones_dark + 0.5)) == 122


def test_blur_matches_reference_filter(random_image):
    total = panorama_filter_oracle(random_image, A.BLUR_MASK)
    expected = np.floor(total / 25.0 + 0.5).astype(np.int64)
    np.testing.assert_array_equal(A.blur(random_image), expected)


def test_convolution_wraps_columns_replicates_rows():
    img = const(0)
    img[:, 0] = 250
    out = A.blur(img)[..., 0]
    assert out[5, 95] == out[5, 1] == 50  # column 0 is the only lit one in both windows
    img = const(0)
    img[0, :] = 250
    out = A.blur(img)[..., 0]
    assert out[0, 10] == 150  # replicated top row: 3 of 5 rows lit


# --- contrast / equalization / saturation ---------------------------------


def test_contrast_examples(random_image):
    np.testing.assert_array_equal(A.adjust_contrast(random_image, 1.0), random_image)
    for c in (0.3, 0.5, 1.5, 3.0):
        assert A.adjust_contrast(const(64), c)[0, 0, 0] == 64
    assert A.adjust_contrast(const(128), 1.5)[0, 0, 0] == 160
    with pytest.raises(ValueError):
        A.adjust_contrast(random_image, 0.0)


def test_equalize_constant():
    np.testing.assert_array_equal(A.equalize(const(77)), const(77))


def test_equalize_two_levels_keeps_order():
    img = const(0)
    img[:, ::2] = 255
    out = A.equalize(img)
    lo, hi = out[0, 1, 0], out[0, 0, 0]
    assert lo < hi
    assert set(np.unique(out)) == {lo, hi}


def test_equalize_uniform_ramp_is_near_identity():
    ramp = np.arange(256, dtype=np.uint8).reshape(8, 32)
    img = np.repeat(np.tile(ramp, (1, 2))[..., None], 3, axis=2)
    out = A.equalize(img)
    assert np.abs(out.astype(int) - img).max() <= 1


def test_saturation_identity_and_gray(random_image):
    assert np.abs(A.adjust_saturation(random_image, 1.0).astype(int) - random_image).max() <= 1
    gray = A.adjust_saturation(random_image, 0.0).astype(int)
    assert np.abs(gray[..., 0] - gray[..., 1]).max() <= 1
    assert np.abs(gray[..., 1] - gray[..., 2]).max() <= 1


def test_saturation_scales_s_channel():
    # (255, 153, 153): V = 1, S = 102/255 = 0.4; S -> 0.6 gives min = 255 * 0.4 = 102
    img = np.array([[[255, 153, 153]]], dtype=np.uint8)
    out = A.adjust_saturation(img, 1.5)
    assert out[0, 0].tolist() == [255, 102, 102]


def test_saturation_rejects_negative():
    with pytest.raises(ValueError):
        A.adjust_saturation(const(3), -0.1)


# --- enumerator and corpus ------------------------------------------------


def test_enumerator_is_deterministic():
    a = [e.to_dict() for e in A.enumerate_combos(7)]
    b = [e.to_dict() for e in A.enumerate_combos(7)]
    c = [e.to_dict() for e in A.enumerate_combos(8)]
    assert a == b
    assert a != c


def test_enumerator_count_is_frozen():
    assert A.COMBO_COUNT == 75
    assert len(A.enumerate_combos(0)) == 75


def _flatten(effect):
    if effect.kind == "combo":
        return [e for child in effect.params["effects"] for e in _flatten(child)]
    return [effect]


def test_enumerator_parameter_ranges():
    for eff in A.enumerate_combos(3):
        for part in _flatten(eff):
            if part.kind == "rotation":
                assert 10 <= part.params["degrees"] <= 350
            elif part.kind in ("global_bright", "global_dark"):
                assert 35 <= part.params["c"] <= 75
            elif part.kind == "local":
                s = part.params["spec"]
                assert 15 <= s.size <= 40 and s.peak in (100, 160)
                assert 0 <= s.center[0] < 128 and 0 <= s.center[1] < 512


def test_enumerator_only_permitted_combinations():
    effects = A.enumerate_combos(11)
    for eff in effects:
        parts = _flatten(eff)
        rot = [p for p in parts if p.kind == "rotation"]
        assert len(rot) <= 1
        if rot:
            assert parts[-1].kind == "rotation"
        core = [p for p in parts if p.kind != "rotation"]
        if len(core) <= 1:
            continue
        kinds = [p.kind for p in core]
        locals_ = [p.params["spec"] for p in core if p.kind == "local"]
        if kinds[0] in ("global_bright", "global_dark"):
            assert kinds[1:] == ["local"]
        elif len(core) == 2:
            assert kinds == ["local", "local"] and locals_[0].shape == "circle"
            assert (locals_[0].polarity, locals_[1].polarity) in {
                ("brighten", "brighten"), ("brighten", "darken"), ("darken", "darken")
            }
        else:
            assert len(core) == 3 and all(s.shape == "circle" for s in locals_)
    n_rot = sum(1 for e in effects if any(p.kind == "rotation" for p in _flatten(e)))
    assert n_rot == 38


def test_every_effect_preserves_shape_and_range(rng):
    img = rng.integers(0, 256, size=(128, 512, 3), dtype=np.uint8)
    for eff in A.enumerate_combos(5):
        out = A.apply_effect(img, eff)
        assert out.shape == img.shape and out.dtype == np.uint8


def test_rotation_effect_round_trip():
    eff = A.EffectDescriptor("rotation", {"degrees": 115.0})
    assert A.EffectDescriptor.from_dict(eff.to_dict()) == eff
    img = np.zeros((4, 512, 3), dtype=np.uint8)
    img[:, 0] = 9
    out = A.apply_effect(img, eff)
    assert out[0, rotation_shift(115.0, 512), 0] == 9


def test_augment_corpus(tmp_path, rng):
    src = rng.integers(0, 256, size=(32, 128, 3), dtype=np.uint8)
    save_panorama(src, tmp_path / "src.png")
    frame = Frame(str(tmp_path / "src.png"), Pose(1.5, -2.0, 0.3), "CR-A", "cloudy", "seq")
    combos = A.enumerate_combos(0, 32, 128)
    manifest = A.augment_corpus([frame], seed=0, out_dir=tmp_path / "aug", image_size=(32, 128))
    assert len(manifest) == len(combos) + 1
    assert all(f.pose == frame.pose and f.room == "CR-A" for f in manifest)
    reread = load_manifest(tmp_path / "aug" / "manifest.txt")
    assert len(reread) == len(combos) + 1
    assert reread.image_path(0).is_file()
    lines = (tmp_path / "aug" / "effects.jsonl").read_text().splitlines()
    assert len(lines) == len(combos) + 1


def test_augment_corpus_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        A.augment_corpus([], 0, tmp_path)
