import numpy as np
import pytest

from avatardiff.imagecore import ImageTensor
from avatardiff.synthgen import SceneParams, render_scene
from avatardiff.tsd import (
    TSDConfig,
    TSDMap,
    default_cutoff,
    extract_tsd,
    low_complement,
    spectrum,
    tsd_to_display,
)


def _random_image(seed, size=64, channels=3):
    rng = np.random.default_rng(seed)
    return ImageTensor(rng.random((size, size, channels), dtype=np.float32))


CFG = TSDConfig(cutoff_w=4)


def test_cutoff_must_be_positive():
    with pytest.raises(ValueError):
        TSDConfig(cutoff_w=0)


def test_default_cutoff_scales_with_resolution():
    assert default_cutoff(512) == 10
    assert default_cutoff(256) == 5
    # floor keeps at least a 2-bin hole at tiny sizes
    assert default_cutoff(64) == 2
    assert default_cutoff(16) == 2


def test_spectrum_dc_bin_is_image_sum():
    img = _random_image(0, size=16)
    spec = spectrum(img)
    dc = spec[8, 8, :]   # centered layout puts DC at (H/2, W/2)
    assert np.allclose(dc.imag, 0.0, atol=1e-8)
    assert np.allclose(dc.real, img.data.sum(axis=(0, 1)), rtol=1e-6)


def test_complementarity():
    for seed in (1, 2, 3):
        img = _random_image(seed)
        recon = extract_tsd(img, CFG).data + low_complement(img, CFG).data
        assert np.abs(recon - img.data).max() <= 1e-5


def test_linearity():
    x, y = _random_image(4), _random_image(5)
    mix = ImageTensor(np.clip(0.3 * x.data + 0.6 * y.data, 0.0, 1.0).astype(np.float32))
    direct = extract_tsd(mix, CFG).data
    combined = 0.3 * extract_tsd(x, CFG).data + 0.6 * extract_tsd(y, CFG).data
    assert np.abs(direct - combined).max() < 1e-5


def test_parseval_energy_split():
    # the two masks partition the spectrum, so spatial energies add exactly
    img = _random_image(6)
    e_img = float((img.data.astype(np.float64) ** 2).sum())
    e_hi = float((extract_tsd(img, CFG).data.astype(np.float64) ** 2).sum())
    e_lo = float((low_complement(img, CFG).data.astype(np.float64) ** 2).sum())
    assert abs(e_img - (e_hi + e_lo)) / e_img < 1e-4


def test_idempotence():
    img = _random_image(7)
    once = extract_tsd(img, CFG)
    twice = extract_tsd(once, CFG)
    assert np.abs(twice.data - once.data).max() <= 1e-5


def test_zero_mean_per_channel():
    tsd = extract_tsd(_random_image(8), CFG)
    means = tsd.data.reshape(-1, 3).mean(axis=0)
    assert np.abs(means).max() < 1e-6


def test_tsdmap_rejects_nonzero_mean():
    with pytest.raises(ValueError):
        TSDMap(np.full((16, 16, 1), 0.5, dtype=np.float32))


def test_display_shift_centers_zero_at_mid_gray():
    tsd = extract_tsd(_random_image(9), CFG)
    disp = tsd_to_display(tsd)
    assert disp.data.min() >= 0.0 and disp.data.max() <= 1.0
    zero_px = np.abs(tsd.data) < 1e-6
    assert np.allclose(disp.data[zero_px], 0.5, atol=1e-6)


def test_detail_is_more_temporally_sensitive_than_raw():
    # relative frame-to-frame change must be larger in the detail maps than
    # in the raw frames: that asymmetry is the whole point of the split
    p = SceneParams(image_size=64, num_frames=6, mouth_amp=0.9, mouth_hz=2.0,
                    emotion_script=(((0, 5), "happy"),))
    seq = render_scene(p)
    cfg = TSDConfig(cutoff_w=default_cutoff(64))
    rel_raw, rel_tsd = [], []
    prev = None
    for f in seq.frames:
        cur_img = f.gt.data.astype(np.float64)
        cur_tsd = extract_tsd(f.gt, cfg).data.astype(np.float64)
        if prev is not None:
            rel_raw.append(np.linalg.norm(cur_img - prev[0]) / np.linalg.norm(prev[0]))
            rel_tsd.append(np.linalg.norm(cur_tsd - prev[1]) / np.linalg.norm(prev[1]))
        prev = (cur_img, cur_tsd)
    assert np.mean(rel_tsd) > np.mean(rel_raw)
