"""Evaluation suite: image quality, optical-flow temporal stability, coefficient errors.

All image metrics operate on the [0, 1] dynamic range. Flow is dense pyramidal
Lucas-Kanade on luminance; its magnitudes are in pixels per frame step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, uniform_filter
from scipy.signal import convolve2d

from .errors import OracleError
from .imagecore import ImageTensor, VideoSequence
from .synthgen import expression_oracle, pose_oracle

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

FLOW_LEVELS = 3
FLOW_WINDOW = 5
FLOW_WARP_ITERS = 3
FLOW_RIDGE = 1e-3

REPORT_SCHEMA = 1


def _arr(img) -> np.ndarray:
    """HxWxC float64 view of an image container or a bare array.

    Bare ndarrays also expose .data (a memoryview), hence the type check.
    """
    d = getattr(img, "data", None)
    a = d if isinstance(d, np.ndarray) else np.asarray(img)
    a = a.astype(np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    return a


def _lum(img) -> np.ndarray:
    a = _arr(img)
    if a.shape[2] == 1:
        return a[:, :, 0]
    return 0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]


def _same_shape(a, b) -> None:
    if _arr(a).shape != _arr(b).shape:
        raise ValueError(f"image shapes differ: {_arr(a).shape} vs {_arr(b).shape}")


def l2(a, b) -> float:
    """Mean squared error over all pixels and channels."""
    _same_shape(a, b)
    d = _arr(a) - _arr(b)
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB against a unit dynamic range.

    Identical images give math.inf; report serialization renders that as "inf".
    """
    mse = l2(a, b)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(a, b) -> float:
    """Mean local structural similarity on luminance, Gaussian-windowed."""
    _same_shape(a, b)
    x = _lum(a)
    y = _lum(b)
    # window never exceeds the image; kept odd so it stays centered
    win = min(SSIM_WINDOW, x.shape[0], x.shape[1])
    if win % 2 == 0:
        win -= 1
    k = _gauss_kernel(win, SSIM_SIGMA)

    def smooth(z):
        return convolve2d(z, k, mode="valid")

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    m = float(np.mean(num / den))
    # the local statistic lies in [-1, 1]; trim float round-off at the ends
    return min(1.0, max(-1.0, m))


@dataclass(frozen=True)
class FlowField:
    """Dense displacement between two frames: u along x (columns), v along y."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u/v must be matching 2-d grids, got {u.shape} and {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow field contains non-finite values")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _pyramid(a: np.ndarray, levels: int) -> list:
    out = [a]
    for _ in range(levels - 1):
        out.append(gaussian_filter(out[-1], 1.0, mode="nearest")[::2, ::2])
    return out


def _resize(a: np.ndarray, shape: tuple) -> np.ndarray:
    h, w = shape
    ys = (np.arange(h) + 0.5) * a.shape[0] / h - 0.5
    xs = (np.arange(w) + 0.5) * a.shape[1] / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(a, [yy, xx], order=1, mode="nearest")


def _window_sum(z: np.ndarray) -> np.ndarray:
    return uniform_filter(z, size=FLOW_WINDOW, mode="nearest") * float(FLOW_WINDOW ** 2)


def optical_flow(prev, next) -> FlowField:
    """Dense Lucas-Kanade flow from prev to next on a coarse-to-fine pyramid.

    Each level refines the upsampled estimate with a few warp iterations; the
    per-pixel 2x2 system is ridge-regularized so flat regions stay solvable.
    """
    _same_shape(prev, next)
    a = _lum(prev)
    b = _lum(next)
    levels = FLOW_LEVELS
    while levels > 1 and min(a.shape) // 2 ** (levels - 1) < 2 * FLOW_WINDOW:
        levels -= 1
    pa = _pyramid(a, levels)
    pb = _pyramid(b, levels)
    u = np.zeros(pa[-1].shape)
    v = np.zeros(pa[-1].shape)
    for lvl in range(levels - 1, -1, -1):
        ca, cb = pa[lvl], pb[lvl]
        if u.shape != ca.shape:
            u = _resize(u, ca.shape) * 2.0
            v = _resize(v, ca.shape) * 2.0
        h, w = ca.shape
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        for _ in range(FLOW_WARP_ITERS):
            py, px = yy + v, xx + u
            warped = map_coordinates(cb, [py, px], order=1, mode="nearest")
            # pixels whose correspondence left the frame keep their current
            # estimate; updating them from clamped samples makes flow run away
            inb = (py >= 0) & (py <= h - 1) & (px >= 0) & (px <= w - 1)
            gy, gx = np.gradient((ca + warped) / 2.0)
            it = warped - ca
            sxx = _window_sum(gx * gx) + FLOW_RIDGE
            sxy = _window_sum(gx * gy)
            syy = _window_sum(gy * gy) + FLOW_RIDGE
            det = sxx * syy - sxy * sxy
            sxt = _window_sum(gx * it)
            syt = _window_sum(gy * it)
            u = u + np.where(inb, (-syy * sxt + sxy * syt) / det, 0.0)
            v = v + np.where(inb, (sxy * sxt - sxx * syt) / det, 0.0)
    return FlowField(u=u, v=v)


_CURVE_FIELDS = {"gt": "gt", "generated": "gt", "coarse": "coarse"}


def temporal_consistency_curve(seq: VideoSequence, field: str = "gt") -> np.ndarray:
    """Mean flow magnitude between each adjacent frame pair; length K-1.

    A synthesized sequence stores its output frames in the gt slot, so both
    "gt" and "generated" read that; "coarse" measures the proxy render.
    """
    if field not in _CURVE_FIELDS:
        raise ValueError(f"field must be one of {sorted(_CURVE_FIELDS)}, got '{field}'")
    attr = _CURVE_FIELDS[field]
    out = np.empty(len(seq) - 1, dtype=np.float64)
    for k in range(len(seq) - 1):
        flow = optical_flow(getattr(seq.frames[k], attr), getattr(seq.frames[k + 1], attr))
        out[k] = float(flow.magnitude.mean())
    return out


def _paired_frames(gen_seq: VideoSequence, gt_seq: VideoSequence):
    if len(gen_seq) != len(gt_seq):
        raise ValueError(
            f"sequences have different frame counts: {len(gen_seq)} vs {len(gt_seq)}")
    return zip(gen_seq.frames, gt_seq.frames)


def pose_error(gen_seq: VideoSequence, gt_seq: VideoSequence) -> float:
    """Mean Euclidean distance between estimated generated-frame pose and GT pose."""
    dists = []
    for gen_fr, gt_fr in _paired_frames(gen_seq, gt_seq):
        try:
            est = pose_oracle(gen_fr.gt, d_p=len(gt_fr.pose))
        except OracleError as e:
            raise OracleError(f"frame {gen_fr.index}: {e}") from e
        dists.append(float(np.linalg.norm(est - gt_fr.pose)))
    return float(np.mean(dists))


def expression_error(gen_seq: VideoSequence, gt_seq: VideoSequence) -> float:
    """Mean Euclidean distance between estimated expression and GT expression."""
    dists = []
    for gen_fr, gt_fr in _paired_frames(gen_seq, gt_seq):
        try:
            est = expression_oracle(gen_fr.gt, d_e=len(gt_fr.expression))
        except OracleError as e:
            raise OracleError(f"frame {gen_fr.index}: {e}") from e
        dists.append(float(np.linalg.norm(est - gt_fr.expression)))
    return float(np.mean(dists))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated evaluation of a generated sequence against its ground truth."""

    l2_per_frame: tuple
    psnr_per_frame: tuple
    ssim_per_frame: tuple
    flow_gt: tuple
    flow_generated: tuple
    pe: float
    ee: float
    lpips: None = None          # reserved; needs a pretrained perceptual net
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("l2_per_frame", "psnr_per_frame", "ssim_per_frame",
                     "flow_gt", "flow_generated"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if any(p < 0 for p in self.psnr_per_frame):
            raise ValueError("psnr must be >= 0 on unit-range images")
        if any(not -1.0 <= s <= 1.0 for s in self.ssim_per_frame):
            raise ValueError("ssim must lie in [-1, 1]")
        if len(self.flow_gt) != len(self.flow_generated):
            raise ValueError("flow curves must have equal length")

    @property
    def l2_mean(self) -> float:
        return float(np.mean(self.l2_per_frame))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_per_frame))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_per_frame))

    @property
    def flow_gap(self) -> float:
        """Mean absolute difference between the two temporal-consistency curves."""
        gap = np.abs(np.asarray(self.flow_generated) - np.asarray(self.flow_gt))
        return float(gap.mean())

    def to_dict(self) -> dict:
        enc = lambda x: "inf" if math.isinf(x) else x
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "frames": len(self.l2_per_frame),
            "per_frame": {
                "l2": list(self.l2_per_frame),
                "psnr": [enc(p) for p in self.psnr_per_frame],
                "ssim": list(self.ssim_per_frame),
            },
            "mean": {
                "l2": self.l2_mean,
                "psnr": enc(self.psnr_mean),
                "ssim": self.ssim_mean,
            },
            "flow": {
                "gt": list(self.flow_gt),
                "generated": list(self.flow_generated),
                "mean_abs_gap": self.flow_gap,
            },
            "pe": self.pe,
            "ee": self.ee,
            "lpips": self.lpips,
        }


def _write_curve_csv(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_index", "magnitude"])
        for k, m in enumerate(curve):
            w.writerow([k, repr(float(m))])


def _plot_curves(path: Path, flow_gt, flow_gen) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    pairs = np.arange(len(flow_gt))
    ax.plot(pairs, flow_gt, label="ground truth", marker="o", markersize=3)
    ax.plot(pairs, flow_gen, label="generated", marker="s", markersize=3)
    ax.set_xlabel("frame pair")
    ax.set_ylabel("mean flow magnitude (px)")
    ax.set_title("temporal consistency")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def report(gen_seq: VideoSequence, gt_seq: VideoSequence, out_dir,
           config: dict | None = None) -> MetricsReport:
    """Evaluate gen_seq against gt_seq and write report.json, CSV curves, a plot.

    The JSON is key-sorted and timestamp-free so identical inputs produce
    identical bytes.
    """
    pairs = list(_paired_frames(gen_seq, gt_seq))
    l2s, psnrs, ssims = [], [], []
    for gen_fr, gt_fr in pairs:
        l2s.append(l2(gen_fr.gt, gt_fr.gt))
        psnrs.append(psnr(gen_fr.gt, gt_fr.gt))
        ssims.append(ssim(gen_fr.gt, gt_fr.gt))
    rep = MetricsReport(
        l2_per_frame=l2s,
        psnr_per_frame=psnrs,
        ssim_per_frame=ssims,
        flow_gt=temporal_consistency_curve(gt_seq, "gt"),
        flow_generated=temporal_consistency_curve(gen_seq, "generated"),
        pe=pose_error(gen_seq, gt_seq),
        ee=expression_error(gen_seq, gt_seq),
        config=dict(config or {}),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_curve_csv(out / "flow_gt.csv", rep.flow_gt)
    _write_curve_csv(out / "flow_generated.csv", rep.flow_generated)
    _plot_curves(out / "flow_curves.png", rep.flow_gt, rep.flow_generated)
    return rep
