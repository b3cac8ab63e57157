import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from nerv import metrics_io as mio


def textured(rng, h=64, w=64):
    y, x = np.mgrid[0:h, 0:w] / 8.0
    base = 0.5 + 0.4 * np.sin(x)[..., None] * np.cos(y)[..., None] * np.array([1.0, 0.7, 0.4])
    return np.clip(base + 0.05 * rng.normal(size=(h, w, 3)), 0, 1)


# ---------------------------------------------------------------- tone mapping


def test_tone_map_values():
    assert mio.tone_map(0.0) == 0.0
    assert mio.tone_map(1.0) == 0.5
    with pytest.raises(ValueError):
        mio.tone_map(np.array([0.5, -1e-9]))


def test_tone_map_monotone(rng):
    a, b = np.sort(rng.exponential(2.0, (2, 10_000)), axis=0)
    keep = a < b
    assert np.all(mio.tone_map(a[keep]) < mio.tone_map(b[keep]))
    assert np.all(mio.tone_map(b) < 1)


# ---------------------------------------------------------------- PSNR


def test_psnr_examples(rng):
    a = rng.uniform(0.2, 0.8, (16, 16, 3))
    assert mio.psnr(a, a) == mio.PSNR_CAP == 99.0
    assert mio.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = rng.uniform(0, 1, a.shape)
    mse = ((a - b) ** 2).sum() / a.size
    assert mio.psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), rel=1e-12)


def test_psnr_symmetric_and_permutation_invariant(rng):
    a, b = rng.uniform(0, 1, (2, 20, 30, 3))
    assert mio.psnr(a, b) == mio.psnr(b, a)
    perm = rng.permutation(20 * 30)
    pa = a.reshape(-1, 3)[perm].reshape(a.shape)
    pb = b.reshape(-1, 3)[perm].reshape(b.shape)
    assert mio.psnr(pa, pb) == pytest.approx(mio.psnr(a, b), rel=1e-14)


def test_metrics_reject_mismatched_shapes():
    with pytest.raises(ValueError):
        mio.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        mio.ms_ssim(np.zeros((32, 32, 3)), np.zeros((32, 31, 3)))


# ---------------------------------------------------------------- SSIM


def test_ssim_matches_reference_implementation(rng):
    a = textured(rng)
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert mio.ssim(a, b) == pytest.approx(ref, rel=1e-10)


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.3, 0.7
    C1, C2 = 0.01**2, 0.03**2
    expect = (2 * c1 * c2 + C1) * C2 / ((c1**2 + c2**2 + C1) * C2)
    got = mio.ssim(np.full((20, 20), c1), np.full((20, 20), c2))
    assert got == pytest.approx(expect, rel=1e-9)


def test_ms_ssim_identical_is_one(rng):
    a = textured(rng)
    assert mio.ms_ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ms_ssim_inverted_is_low(rng):
    a = textured(rng)
    single = structural_similarity(a, 1 - a, data_range=1.0, channel_axis=-1, gaussian_weights=True,
                                   sigma=1.5, use_sample_covariance=False)
    assert single < 0.5
    assert mio.ms_ssim(a, 1 - a) < 0.5


def test_ms_ssim_symmetric_and_bounded(rng):
    a = textured(rng)
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    v = mio.ms_ssim(a, b)
    assert 0 <= v <= 1
    assert v == pytest.approx(mio.ms_ssim(b, a), abs=1e-14)


def test_ms_ssim_translation_invariant(rng):
    big = textured(rng, 80, 80)
    noisy = np.clip(big + 0.1 * rng.normal(size=big.shape), 0, 1)
    base = mio.ms_ssim(big[:64, :64], noisy[:64, :64])
    for dy, dx in ((4, 0), (0, 8), (16, 16)):
        shifted = mio.ms_ssim(big[dy : dy + 64, dx : dx + 64], noisy[dy : dy + 64, dx : dx + 64])
        assert shifted == pytest.approx(base, abs=0.01)


def test_ms_ssim_scale_fallback(rng):
    assert mio.ms_ssim_scales((256, 256)) == 5
    assert mio.ms_ssim_scales((64, 64)) == 3
    assert mio.ms_ssim_scales((16, 16)) == 1
    assert mio.ms_ssim_scales((12, 12)) == 1
    a = textured(rng, 64, 64)
    _, k = mio.ms_ssim(a, a, return_scales=True)
    assert k == 3
    with pytest.raises(ValueError):
        mio.ms_ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ms_ssim_weights_are_standard():
    np.testing.assert_allclose(mio.MS_SSIM_WEIGHTS, [0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    assert mio.MS_SSIM_WEIGHTS.sum() == pytest.approx(1.0, abs=1e-3)


# ---------------------------------------------------------------- files


def test_pfm_round_trip_bitwise(tmp_path, rng):
    img = rng.exponential(3.0, (7, 5, 3)).astype(np.float32)
    p = str(tmp_path / "a.pfm")
    mio.write_pfm(p, img)
    back = mio.read_pfm(p)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, img)
    raw = open(p, "rb").read()
    assert raw.startswith(b"PF\n5 7\n-1.0\n")
    # bottom row is stored first
    first = np.frombuffer(raw[len(b"PF\n5 7\n-1.0\n"):][:12], "<f4")
    np.testing.assert_array_equal(first, img[-1, 0])


def test_pfm_errors_name_offsets(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"PX\n2 2\n-1.0\n" + b"\0" * 48)
    with pytest.raises(mio.FormatError, match="byte 0"):
        mio.read_pfm(str(p))
    p.write_bytes(b"PF\n2 2\n-1.0\n" + b"\0" * 20)
    with pytest.raises(mio.FormatError, match="byte"):
        mio.read_pfm(str(p))
    p.write_bytes(b"PF\nx 2\n-1.0\n")
    with pytest.raises(mio.FormatError, match="byte 3"):
        mio.read_pfm(str(p))


def test_png_preview_tonemapped_srgb(tmp_path):
    img = np.array([[[0.0, 1.0, 1e9]]])
    p = str(tmp_path / "a.png")
    mio.write_png(p, img)
    px = mio.read_png(p)[0, 0]
    assert px[0] == 0 and px[2] == 255
    assert px[1] == round((1.055 * 0.5 ** (1 / 2.4) - 0.055) * 255)


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"w.0": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
              "s": np.float32(2.5) * np.ones(())}
    meta = {"step": 7, "config": {"lam": 20.0}}
    p = str(tmp_path / "c.nerv")
    mio.save_checkpoint(p, arrays, meta)
    got, m = mio.load_checkpoint(p)
    assert m == meta and list(got) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(got[k], arrays[k])
        assert got[k].shape == arrays[k].shape and got[k].dtype == np.float32
    raw = open(p, "rb").read()
    assert raw[:4] == b"NERV"
    assert not (tmp_path / "c.nerv.tmp").exists()


def test_truncated_checkpoint_names_array(tmp_path, rng):
    p = tmp_path / "c.nerv"
    mio.save_checkpoint(str(p), {"first": np.ones(10), "second": np.ones(10)}, {})
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(mio.FormatError, match="second"):
        mio.load_checkpoint(str(p))
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(mio.FormatError, match="magic"):
        mio.load_checkpoint(str(p))
    p.write_bytes(raw[:20])
    with pytest.raises(mio.FormatError, match="header"):
        mio.load_checkpoint(str(p))
    p.write_bytes(raw + b"\0")
    with pytest.raises(mio.FormatError, match="trailing"):
        mio.load_checkpoint(str(p))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=0, max_size=3))
def test_checkpoint_any_shape(shape):
    a = np.arange(int(np.prod(shape)), dtype=np.float32).reshape(shape)
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.nerv")
        mio.save_checkpoint(p, {"a": a}, {"k": 1})
        got, _ = mio.load_checkpoint(p)
        np.testing.assert_array_equal(got["a"], a)
        assert got["a"].shape == a.shape
