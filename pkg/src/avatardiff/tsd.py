"""Temporally-sensitive detail maps via hard radial spectral splitting.

High-frequency image content (skin texture, feature edges, flicker) changes
much faster across neighboring frames than the low-frequency base, so the
high-pass residual is where temporal consistency is won or lost. The split
here is a binary radial mask on the centered 2-D spectrum: exact, linear and
self-inverse, which keeps the decomposition algebra test-friendly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import ImageTensor


@dataclass(frozen=True)
class TSDConfig:
    """cutoff_w: bins with radial index below this are removed from the detail map."""

    cutoff_w: int = 10

    def __post_init__(self):
        if self.cutoff_w < 1:
            raise ValueError(f"cutoff_w must be >= 1, got {self.cutoff_w}")


def default_cutoff(height: int) -> int:
    """Scale the reference cutoff (10 bins at 512 px) with resolution."""
    return max(2, round(10 * height / 512))


@dataclass(frozen=True)
class TSDMap:
    """High-pass detail map; zero mean per channel since the DC bin is removed."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3:
            raise ValueError(f"detail map must be HxWxC, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("detail map contains non-finite values")
        means = a.reshape(-1, a.shape[2]).mean(axis=0)
        if np.abs(means).max() > 1e-3:
            raise ValueError(f"detail map must be zero-mean per channel, means {means}")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def shape(self):
        return self.data.shape


def _as_array(img) -> np.ndarray:
    # bare ndarrays also expose .data (a memoryview), hence the type check
    d = getattr(img, "data", None)
    a = d if isinstance(d, np.ndarray) else np.asarray(img)
    return a.astype(np.float64)


def spectrum(img) -> np.ndarray:
    """Centered 2-D FFT per channel, complex, same HxWxC layout."""
    a = _as_array(img)
    return np.fft.fftshift(np.fft.fft2(a, axes=(0, 1)), axes=(0, 1))


def _high_mask(h: int, w: int, cutoff: int) -> np.ndarray:
    fy = np.fft.fftshift(np.fft.fftfreq(h, d=1.0 / h))
    fx = np.fft.fftshift(np.fft.fftfreq(w, d=1.0 / w))
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return r >= cutoff


def extract_tsd(img, cfg: TSDConfig) -> TSDMap:
    """High-pass detail: zero all spectral bins with radial index < cutoff_w."""
    spec = spectrum(img)
    mask = _high_mask(spec.shape[0], spec.shape[1], cfg.cutoff_w)
    spec = spec * mask[:, :, None]
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(0, 1)), axes=(0, 1)).real
    return TSDMap(out.astype(np.float32))


def low_complement(img, cfg: TSDConfig) -> ImageTensor:
    """Low-pass remainder; adds exactly with extract_tsd back to the input."""
    spec = spectrum(img)
    mask = _high_mask(spec.shape[0], spec.shape[1], cfg.cutoff_w)
    spec = spec * (~mask)[:, :, None]
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(0, 1)), axes=(0, 1)).real
    return ImageTensor(out.astype(np.float32))


def tsd_to_display(tsd: TSDMap) -> ImageTensor:
    """Shift a signed detail map to [0, 1] for PNG export (mid-gray is zero)."""
    return ImageTensor(np.clip(tsd.data + 0.5, 0.0, 1.0))
