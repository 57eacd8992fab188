import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percepgen.effects import (
    BLUE_HUE, EffectParams, FileDepth, FileSegments, GradientDepth, KMeansSegments, Providers,
    add_salt_pepper, blur_sigma_map, chromostereopsis, eccentricity, foveate,
    quantize_dynamic_range, read_depth_png, read_label_png, salt_pepper_positions,
    synthesize_pair, write_depth_png, write_label_png,
)
from percepgen.errors import ContractError, DomainError
from percepgen.imaging import Image, rgb_to_hsv
from percepgen.tasks import TaskKind, TaskSpec


def rand_u8(seed, h=32, w=32):
    return Image(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8), "u8")


def tasks(*kinds, intensity=1.0):
    return [TaskSpec(TaskKind.parse(k), intensity) for k in kinds]


# --- quantization -----------------------------------------------------------------


def test_quantize_examples():
    v = np.array([[[0, 128, 255]]], dtype=np.uint8)
    out = quantize_dynamic_range(Image(v, "u8"), 4).data[0, 0]
    assert list(out) == [0, 136, 255]
    img = rand_u8(0)
    assert quantize_dynamic_range(img, 8).equals(img)


def test_quantize_level_count():
    ramp = Image(np.repeat(np.arange(256, dtype=np.uint8), 3).reshape(1, 256, 3), "u8")
    for bits in range(1, 9):
        assert len(np.unique(quantize_dynamic_range(ramp, bits).data)) == 2**bits


@pytest.mark.parametrize("bits", [0, 9, 4.0, "4"])
def test_quantize_rejects_bits(bits):
    with pytest.raises(ContractError):
        quantize_dynamic_range(rand_u8(0), bits)


def test_quantize_needs_u8():
    with pytest.raises(DomainError):
        quantize_dynamic_range(rand_u8(0).to("unit"), 4)


# --- salt and pepper ---------------------------------------------------------------


def test_salt_pepper_counts():
    img = Image(np.full((100, 100, 3), 100, dtype=np.uint8), "u8")
    out = add_salt_pepper(img, 0.1, seed=3).data
    salt = np.all(out == 255, axis=-1).sum()
    pepper = np.all(out == 0, axis=-1).sum()
    assert (salt, pepper) == (500, 500)
    assert np.all((out == 100).all(-1) | (out == 255).all(-1) | (out == 0).all(-1))


def test_salt_pepper_extremes():
    img = rand_u8(1)
    assert add_salt_pepper(img, 0.0, 0).equals(img)
    full = add_salt_pepper(img, 1.0, 0).data
    assert np.all(np.all(full == 0, -1) | np.all(full == 255, -1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_salt_pepper_positions_property(h, w, d, seed):
    salt, pepper = salt_pepper_positions(h, w, d, seed)
    n = int(np.floor(round(d * h * w, 9)))
    assert len(salt) + len(pepper) == n
    assert len(salt) == (n + 1) // 2
    assert len(set(salt) | set(pepper)) == n
    s2, p2 = salt_pepper_positions(h, w, d, seed)
    assert np.array_equal(salt, s2) and np.array_equal(pepper, p2)


def test_salt_pepper_seed_matters():
    img = rand_u8(2)
    assert not add_salt_pepper(img, 0.2, 1).equals(add_salt_pepper(img, 0.2, 2))
    with pytest.raises(ContractError):
        add_salt_pepper(img, 1.5, 0)


# --- foveation ----------------------------------------------------------------------


def test_sigma_schedule():
    e = eccentricity(64, 64, (0.5, 0.5))
    s = blur_sigma_map(64, 64, (0.5, 0.5), 0.15, 12.0, 1.0)
    assert np.all(s[e <= 0.15] == 0)
    expected = 12.0 * np.maximum(0, (e - 0.15) / 0.85)
    np.testing.assert_allclose(s, expected)
    assert s.max() <= 12.0 * (0.5 - 0.15) / 0.85 + 1e-9


def test_foveal_disk_bit_identical():
    img = rand_u8(3, 64, 64).to("unit")
    out = foveate(img, (0.3, 0.6), 0.2, 8.0, 1.0, seed=1)
    e = eccentricity(64, 64, (0.3, 0.6))
    inside = e <= 0.2
    assert inside.any()
    assert np.array_equal(out.data[inside], img.data[inside])
    assert not np.array_equal(out.data[~inside], img.data[~inside])


def test_foveate_constant_image():
    img = Image(np.full((48, 48, 3), 0.37), "unit")
    out = foveate(img, sigma_max=10.0)
    np.testing.assert_allclose(out.data, img.data, atol=1e-9)
    assert out.to("u8").equals(img.to("u8"))


def test_foveate_checkerboard_local_means():
    n = 128
    yy, xx = np.mgrid[0:n, 0:n]
    board = ((yy + xx) % 2).astype(np.float64)
    img = Image(np.repeat(board[..., None], 3, axis=-1), "unit")
    out = foveate(img, (0.5, 0.5), 0.1, 12.0, 1.0, seed=5).data
    e = eccentricity(n, n, (0.5, 0.5))
    checked = 0
    for by in range(0, n, 8):
        for bx in range(0, n, 8):
            if e[by:by + 8, bx:bx + 8].min() < 0.4:
                continue
            got = out[by:by + 8, bx:bx + 8].mean()
            want = img.data[by:by + 8, bx:bx + 8].mean()
            assert abs(got - want) <= 0.02
            checked += 1
    assert checked >= 8


def test_foveate_is_deterministic_and_seeded():
    img = rand_u8(4, 64, 64).to("unit")
    a = foveate(img, seed=1)
    assert a.equals(foveate(img, seed=1))
    assert not a.equals(foveate(img, seed=2))
    with pytest.raises(ContractError):
        foveate(img, gaze=(1.2, 0.5))


def test_foveate_intensity_scales_effect():
    img = rand_u8(6, 64, 64).to("unit")
    weak = np.abs(foveate(img, intensity=0.3).data - img.data).mean()
    strong = np.abs(foveate(img, intensity=1.0).data - img.data).mean()
    assert 0 < weak < strong


# --- chromostereopsis -----------------------------------------------------------------


def colourful(h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    hsv = np.stack([rng.random((h, w)), rng.uniform(0.3, 1, (h, w)), rng.uniform(0.3, 1, (h, w))], -1)
    from percepgen.imaging import hsv_to_rgb

    return hsv_to_rgb(Image(hsv, "unit", "HSV"))


def two_segments(h=16, w=16):
    seg = np.zeros((h, w), dtype=np.int64)
    seg[:, w // 2:] = 1
    depth = np.where(seg == 0, 0.1, 0.9)
    return depth, seg


def test_chromo_two_segments_exact_hues():
    img = colourful()
    depth, seg = two_segments()
    out = rgb_to_hsv(chromostereopsis(img, depth, seg, 0.5, 1.0, 1.0)).data
    np.testing.assert_allclose(out[..., 0][seg == 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[..., 0][seg == 1], BLUE_HUE, atol=1e-12)
    assert BLUE_HUE == pytest.approx(240 / 360)


def test_chromo_preserves_s_and_v():
    img = colourful(seed=1)
    depth, seg = two_segments()
    src = rgb_to_hsv(img).data
    out = rgb_to_hsv(chromostereopsis(img, depth, seg, intensity=0.6)).data
    np.testing.assert_allclose(out[..., 1:], src[..., 1:], atol=1e-9)
    u8_in, u8_out = img.to("u8").data.max(-1), chromostereopsis(img, depth, seg).to("u8").data.max(-1)
    assert np.abs(u8_in.astype(int) - u8_out).max() <= 1


def test_chromo_identity_and_tie():
    img = colourful(seed=2)
    depth, seg = two_segments()
    assert chromostereopsis(img, depth, seg, intensity=0.0).equals(img)
    tied = np.full(depth.shape, 0.5)
    out = rgb_to_hsv(chromostereopsis(img, tied, seg, threshold=0.5)).data
    np.testing.assert_allclose(out[..., 0], BLUE_HUE, atol=1e-12)


def test_chromo_partial_moves_along_short_arc():
    # hue 0.9 toward red (0 == 1) should move up through 1, not down through 0.5
    hsv = np.zeros((4, 4, 3))
    hsv[..., 0], hsv[..., 1], hsv[..., 2] = 0.9, 1.0, 1.0
    from percepgen.imaging import hsv_to_rgb

    img = hsv_to_rgb(Image(hsv, "unit", "HSV"))
    seg = np.zeros((4, 4), dtype=np.int64)
    out = rgb_to_hsv(chromostereopsis(img, np.zeros((4, 4)), seg, intensity=0.5)).data
    np.testing.assert_allclose(out[..., 0], 0.95, atol=1e-9)


def test_chromo_size_mismatch():
    img = colourful()
    with pytest.raises(ContractError):
        chromostereopsis(img, np.zeros((3, 3)), np.zeros((16, 16), dtype=int))
    with pytest.raises(ContractError):
        chromostereopsis(img, np.zeros((16, 16)), np.zeros((16, 15), dtype=int))


# --- providers --------------------------------------------------------------------------


def test_gradient_depth_and_kmeans():
    img = rand_u8(7, 24, 20)
    d = GradientDepth()(img)
    assert d.shape == (24, 20) and d[0].min() > d[-1].max()
    seg = KMeansSegments(k=5, seed=1)(img)
    assert seg.shape == (24, 20)
    assert set(np.unique(seg)) == set(range(seg.max() + 1))
    assert np.array_equal(seg, KMeansSegments(k=5, seed=1)(img))


def test_map_png_round_trip(tmp_path):
    depth = np.linspace(0, 1, 12 * 10).reshape(12, 10)
    write_depth_png(depth, tmp_path / "d" / "a.png")
    np.testing.assert_allclose(read_depth_png(tmp_path / "d" / "a.png"), depth, atol=0.5 / 255 + 1e-12)
    labels = np.arange(120).reshape(12, 10) % 7
    write_label_png(labels, tmp_path / "s" / "a.png")
    assert np.array_equal(read_label_png(tmp_path / "s" / "a.png"), labels)
    img = rand_u8(0, 12, 10)
    assert FileDepth(tmp_path / "d")(img, "a.png").shape == (12, 10)
    assert np.array_equal(FileSegments(tmp_path / "s")(img, "a.png"), labels)


# --- synthesis ----------------------------------------------------------------------------


def test_params_validation():
    with pytest.raises(ContractError):
        EffectParams(gaze=(2, 0))
    with pytest.raises(ContractError):
        EffectParams(quant_bits=9)
    p = EffectParams(seed=4)
    assert EffectParams.from_dict(p.as_dict()) == p
    assert p.sigma_for(512, 512) == pytest.approx(2 * p.sigma_max)


def test_pair_definitions():
    src = rand_u8(8, 32, 32)
    p = EffectParams(seed=9)
    x, y = synthesize_pair(src, tasks("ID"), p)
    assert x.equals(add_salt_pepper(src, p.noise_density, p.seed)) and y.equals(src)
    x, y = synthesize_pair(src, tasks("ID", "F"), p)
    assert x.equals(add_salt_pepper(src, p.noise_density, p.seed))
    fov = foveate(src.to("unit"), p.gaze, p.fovea_radius, p.sigma_for(32, 32), 1.0, p.seed).to("u8")
    assert y.equals(fov)
    x, y = synthesize_pair(src, tasks("DRE"), p)
    assert x.equals(quantize_dynamic_range(src, 4)) and y.equals(src)


def test_restoration_intensity_blends_target():
    src = rand_u8(10)
    x, y = synthesize_pair(src, tasks("DRE", intensity=0.3))
    q = quantize_dynamic_range(src, 4).data.astype(float)
    want = np.floor(0.7 * q + 0.3 * src.data + 0.5).astype(np.uint8)
    assert np.array_equal(y.data, want)


def test_duplicate_task_rejected():
    with pytest.raises(ContractError):
        synthesize_pair(rand_u8(0), tasks("ID", "ID"))
    with pytest.raises(ContractError):
        synthesize_pair(rand_u8(0), [])


def test_custom_providers_used():
    src = rand_u8(11, 16, 16)
    depth, seg = two_segments()
    prov = Providers(lambda img, name=None: depth, lambda img, name=None: seg)
    _, y = synthesize_pair(src, tasks("C"), providers=prov)
    want = chromostereopsis(src.to("unit"), depth, seg).to("u8")
    assert y.equals(want)
