import colorsys
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from percepgen.errors import ContractError, DomainError
from percepgen.imaging import (
    Image, compare, decode_png, encode_png, hsv_to_rgb, psnr, read_png, resize_center_crop,
    rgb_to_hsv, ssim, write_png,
)


def rand_u8(rng, h=16, w=16):
    return Image(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), "u8")


def test_u8_unit_round_trip_every_value():
    v = np.arange(256, dtype=np.uint8)
    img = Image(np.stack([v, v[::-1], v], axis=-1)[None], "u8")
    assert img.to("unit").to("u8").equals(img)
    assert img.to("signed").to("u8").equals(img)


def test_signed_endpoints():
    img = Image(np.array([[[0, 255, 128]]], dtype=np.uint8), "u8")
    s = img.to("signed").data[0, 0]
    assert s[0] == -1.0 and s[1] == 1.0
    assert s[2] == pytest.approx(2 * 128 / 255 - 1)


def test_invariants_rejected():
    with pytest.raises(DomainError):
        Image(np.full((2, 2, 3), 1.5), "unit")
    with pytest.raises(DomainError):
        Image(np.zeros((2, 2, 3), dtype=np.float32), "u8")
    with pytest.raises(ContractError):
        Image(np.zeros((2, 2), dtype=np.uint8), "u8")
    with pytest.raises(DomainError):
        Image(np.zeros((2, 2, 3)), "unit", "HSV").to("u8")
    with pytest.raises(DomainError):
        Image(np.zeros((2, 2, 3)), "bogus")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 7, 3), elements=st.floats(0, 1)))
def test_hsv_matches_colorsys(data):
    hsv = rgb_to_hsv(Image(data, "unit")).data
    for (r, g, b), (h, s, v) in zip(data.reshape(-1, 3), hsv.reshape(-1, 3)):
        eh, es, ev = colorsys.rgb_to_hsv(r, g, b)
        assert s == pytest.approx(es, abs=1e-9)
        assert v == pytest.approx(ev, abs=1e-9)
        if es > 1e-9:
            assert min(abs(h - eh), 1 - abs(h - eh)) == pytest.approx(0, abs=1e-9)
    back = hsv_to_rgb(Image(hsv, "unit", "HSV")).data
    np.testing.assert_allclose(back, data, atol=1e-9)


def test_psnr_known_value():
    a = Image(np.zeros((4, 4, 3), dtype=np.uint8), "u8")
    b = Image(np.full((4, 4, 3), 5, dtype=np.uint8), "u8")
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / 25))
    assert psnr(a, a) == math.inf


def test_psnr_domain_scaling():
    # the same relative error gives the same PSNR in every domain
    rng = np.random.default_rng(1)
    a, b = rand_u8(rng), rand_u8(rng)
    ref = psnr(a, b)
    assert psnr(a.to("unit"), b.to("unit")) == pytest.approx(ref, abs=1e-9)
    assert psnr(a.to("signed"), b.to("signed")) == pytest.approx(ref, abs=1e-9)


def test_metric_contracts():
    rng = np.random.default_rng(0)
    a = rand_u8(rng)
    with pytest.raises(ContractError):
        psnr(a, rand_u8(rng, 8, 8))
    with pytest.raises(ContractError):
        psnr(a, a.to("unit"))
    with pytest.raises(ContractError):
        ssim(rand_u8(rng, 10, 10), rand_u8(rng, 10, 10))


def test_ssim_bounds():
    rng = np.random.default_rng(2)
    a, b = rand_u8(rng, 24, 24), rand_u8(rng, 24, 24)
    assert ssim(a, a) == pytest.approx(1.0)
    assert -1 <= ssim(a, b) < 0.5
    inv = Image(255 - a.data, "u8")
    assert ssim(a, inv) < 0
    r = compare(a, b)
    assert r.as_dict() == {"psnr_db": r.psnr_db, "ssim": r.ssim}


def test_png_round_trip(tmp_path):
    img = rand_u8(np.random.default_rng(3), 9, 13)
    assert read_png(write_png(img, tmp_path / "a" / "x.png")).equals(img)
    assert decode_png(encode_png(img)).equals(img)


def test_resize_center_crop():
    img = rand_u8(np.random.default_rng(4), 40, 60)
    out = resize_center_crop(img, 32)
    assert out.shape == (32, 32, 3) and out.domain == "u8"
