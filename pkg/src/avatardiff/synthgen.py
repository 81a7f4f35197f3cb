"""Procedural talking-head scenes: analytic renderer plus measurement oracles.

The head is an ellipsoid of revolution (equal x/z semi-axes), so a yaw turn
leaves the silhouette fixed while facial features, bump-mapped nose normals
and shading rotate across it. That gives every frame free ground truth for
pose, expression and per-pixel surface normals, and lets the oracles below
invert the render analytically.

Face features live in spherical face coordinates (longitude lambda, latitude
phi, y down); a yaw theta shifts image longitude by +theta. The mouth is a
band of half-width MOUTH_HALF_W whose half-height grows linearly with the
aperture and whose centerline bends parabolically with the smile (the bend is
area-neutral, which keeps aperture and smile measurements decoupled).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize

from .errors import OracleError
from .imagecore import (
    DEFAULT_EXPR_DIM,
    DEFAULT_POSE_DIM,
    FrameRecord,
    ImageTensor,
    VideoSequence,
)

# Canonical closed emotion label set (8 labels) and the smile curvature each
# one drives. Sign carries the emotion family; magnitude the intensity.
EMOTION_SMILES = {
    "happy": 0.9,
    "surprised": 0.6,
    "contempt": 0.3,
    "neutral": 0.0,
    "fear": -0.3,
    "disgusted": -0.5,
    "angry": -0.7,
    "sad": -0.9,
}
EMOTION_LABELS = tuple(EMOTION_SMILES)

# Head geometry/material constants, shared by renderer and oracles (radians).
EYE_LON = 0.42
EYE_LAT = -0.38
EYE_RADIUS = 0.20
MOUTH_LAT = 0.47
MOUTH_HALF_W = 0.50
MOUTH_H0 = 0.045       # half-height with closed mouth
MOUTH_H_GAIN = 0.18    # half-height added per unit aperture
SMILE_GAIN = 0.20      # centerline bend per unit smile
NOSE_LAT = 0.04
NOSE_SIGMA = 0.22
NOSE_GAIN = 0.35
FEATURE_DARKEN = 0.85
ALBEDO = np.array([0.84, 0.66, 0.55])
AMBIENT = 0.40
DIFFUSE = 0.60
LIGHT = np.array([-0.35, -0.40, 0.84]) / np.linalg.norm([-0.35, -0.40, 0.84])
BG_NORMAL = np.array([0.5, 0.5, 1.0], dtype=np.float32)

ALBEDO_LUM = float(0.299 * ALBEDO[0] + 0.587 * ALBEDO[1] + 0.114 * ALBEDO[2])


@dataclass(frozen=True)
class SceneParams:
    image_size: int = 64
    num_frames: int = 48
    fps: float = 25.0
    seed: int = 0
    head_axes: tuple | None = None        # (a, b) ellipse radii in pixels
    mouth_amp: float = 0.9
    yaw_amp: float = 0.25
    mouth_hz: float = 1.0
    yaw_hz: float = 0.4
    # None: first half "happy", second half "sad" (opposite-sign smiles keep
    # the emotions easy to tell apart downstream)
    emotion_script: tuple | None = None

    def __post_init__(self):
        s = self.image_size
        if s < 8 or (s & (s - 1)):
            raise ValueError(f"image_size must be a power of two >= 8, got {s}")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if self.mouth_amp < 0 or self.yaw_amp < 0:
            raise ValueError("mouth_amp and yaw_amp must be >= 0")
        axes = self.head_axes
        if axes is None:
            axes = (round(0.33 * s), round(0.42 * s))
        axes = (float(axes[0]), float(axes[1]))
        if axes[0] < 4 or axes[1] < 4:
            raise ValueError(f"degenerate head ellipse: axes {axes} (need >= 4 px)")
        object.__setattr__(self, "head_axes", axes)
        raw = self.emotion_script
        if raw is None:
            half = self.num_frames // 2
            raw = (((0, half - 1), "happy"), ((half, self.num_frames - 1), "sad"))
        script = tuple(((int(r[0]), int(r[1])), str(lab)) for r, lab in raw)
        covered = []
        for (lo, hi), lab in script:
            if lab not in EMOTION_SMILES:
                raise ValueError(f"unknown emotion label '{lab}'")
            covered.extend(range(lo, hi + 1))
        if sorted(covered) != list(range(self.num_frames)):
            raise ValueError("emotion_script frame ranges must partition 0..K-1")
        object.__setattr__(self, "emotion_script", script)

    def label_for(self, i: int) -> str:
        for (lo, hi), lab in self.emotion_script:
            if lo <= i <= hi:
                return lab
        raise ValueError(f"frame {i} not covered by emotion script")


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 1.5
    noise_sigma: float = 0.02
    expr_damping: float = 0.6

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if not 0.0 <= self.expr_damping <= 1.0:
            raise ValueError("expr_damping must lie in [0, 1]")


def _sphere_grid(size: int, axes: tuple):
    """Unit-sphere coords per pixel for the revolve-ellipsoid head."""
    a, b = axes
    c = size / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    x = (xs + 0.5 - c) / a
    y = (ys + 0.5 - c) / b
    r2 = x * x + y * y
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    return x, y, z, r2


def _soft(signed: np.ndarray, eps: float) -> np.ndarray:
    """0..1 coverage ramp over a signed-distance band of width eps."""
    return np.clip(signed / eps + 0.5, 0.0, 1.0)


def _mouth_mask(lam_face, phi, aperture: float, smile: float, eps: float):
    """Mouth band: |phi - centerline| <= half-height inside |lam| <= half-width."""
    u = (lam_face / MOUTH_HALF_W) ** 2 - 1.0 / 3.0
    center = MOUTH_LAT - SMILE_GAIN * smile * u
    half_h = MOUTH_H0 + MOUTH_H_GAIN * aperture
    # crisper lambda edge keeps the high-leverage mouth corners compact
    return _soft(MOUTH_HALF_W - np.abs(lam_face), 0.5 * eps) * _soft(half_h - np.abs(phi - center), eps)


def _feature_mask(lam_face, phi, aperture: float, smile: float, eps: float):
    """Combined eye+mouth darkening mask in face coordinates."""
    mouth = _mouth_mask(lam_face, phi, aperture, smile, eps)
    # eyes: angular discs on the sphere
    cphi = np.cos(phi)
    sx, sy, sz = np.sin(lam_face) * cphi, np.sin(phi), np.cos(lam_face) * cphi
    ce, se = math.cos(EYE_LAT), math.sin(EYE_LAT)
    eyes = 0.0
    for side in (-1.0, 1.0):
        ex, ey, ez = math.sin(side * EYE_LON) * ce, se, math.cos(side * EYE_LON) * ce
        d = sx * ex + sy * ey + sz * ez
        eyes = np.maximum(eyes, _soft((d - math.cos(EYE_RADIUS)) / math.sin(EYE_RADIUS), eps))
    return np.clip(mouth + eyes, 0.0, 1.0)


def _geo_normal(x, y, z, axes):
    a, b = axes
    nx, ny, nz = x / a, y / b, z / a
    norm = np.sqrt(nx * nx + ny * ny + nz * nz)
    norm = np.where(norm > 0, norm, 1.0)
    return nx / norm, ny / norm, nz / norm


def _bumped_normal(x, y, z, axes, yaw: float):
    """Geometric normal perturbed by the nose bump (face-frame gaussian)."""
    nx, ny, nz = _geo_normal(x, y, z, axes)
    zs = np.maximum(z, 1e-6)
    lam = np.arctan2(x, zs)
    phi = np.arcsin(np.clip(y, -1.0, 1.0))
    dl = lam - yaw
    dp = phi - NOSE_LAT
    g = np.exp(-(dl * dl + dp * dp) / (2.0 * NOSE_SIGMA**2))
    glam = -NOSE_GAIN * g * (-dl / NOSE_SIGMA**2)   # -d(height)/d(lambda)
    gphi = -NOSE_GAIN * g * (-dp / NOSE_SIGMA**2)
    # tangent basis of the sphere parametrization, world frame
    cl, sl = np.cos(lam), np.sin(lam)
    cp, sp = np.cos(phi), np.sin(phi)
    tx_l, ty_l, tz_l = cl, np.zeros_like(cl), -sl
    tx_p, ty_p, tz_p = -sl * sp, cp, -cl * sp
    bx = nx + glam * tx_l + gphi * tx_p
    by = ny + glam * ty_l + gphi * ty_p
    bz = nz + glam * tz_l + gphi * tz_p
    norm = np.sqrt(bx * bx + by * by + bz * bz)
    return bx / norm, by / norm, bz / norm


def _render_frame(size: int, axes: tuple, yaw: float, aperture: float, smile: float):
    """Shaded RGB frame over a black background, float in [0, 1]."""
    x, y, z, r2 = _sphere_grid(size, axes)
    alpha = np.clip((1.0 - np.sqrt(np.clip(r2, 0.0, None))) * min(axes), 0.0, 1.0)
    zs = np.maximum(z, 1e-6)
    lam = np.arctan2(x, zs)
    phi = np.arcsin(np.clip(y, -1.0, 1.0))
    eps = 1.5 / axes[0]
    mask = _feature_mask(lam - yaw, phi, aperture, smile, eps)
    # shading uses the geometric normal (yaw-invariant on a revolve surface);
    # the nose bump lives only in the normal map so the oracles can invert
    # the shading model exactly
    nx, ny, nz = _geo_normal(x, y, z, axes)
    shade = AMBIENT + DIFFUSE * np.clip(nx * LIGHT[0] + ny * LIGHT[1] + nz * LIGHT[2], 0.0, None)
    darken = 1.0 - FEATURE_DARKEN * mask
    img = alpha[:, :, None] * shade[:, :, None] * darken[:, :, None] * ALBEDO[None, None, :]
    return img.astype(np.float32)


def _render_normal_map(size: int, axes: tuple, yaw: float):
    x, y, z, r2 = _sphere_grid(size, axes)
    head = r2 < 1.0
    nx, ny, nz = _bumped_normal(x, y, z, axes, yaw)
    out = np.broadcast_to(BG_NORMAL, (size, size, 3)).copy()
    enc = np.stack([(nx + 1) / 2, (ny + 1) / 2, (nz + 1) / 2], axis=-1)
    out[head] = enc[head]
    return out.astype(np.float32)


def mouth_aperture_at(p: SceneParams, i: int) -> float:
    return p.mouth_amp * (0.5 + 0.5 * math.sin(2.0 * math.pi * p.mouth_hz * i / p.fps))


def yaw_at(p: SceneParams, i: int) -> float:
    return p.yaw_amp * math.sin(2.0 * math.pi * p.yaw_hz * i / p.fps)


def render_scene(
    p: SceneParams,
    d: DegradationParams = DegradationParams(),
    d_p: int = DEFAULT_POSE_DIM,
    d_e: int = DEFAULT_EXPR_DIM,
) -> VideoSequence:
    """Render ground truth, degraded coarse proxy, and normal map per frame.

    The coarse frame re-renders the head with the expression damped, then
    blurs and adds per-frame seeded Gaussian noise; same seed, same bits.
    """
    frames = []
    size, axes = p.image_size, p.head_axes
    for i in range(p.num_frames):
        m = mouth_aperture_at(p, i)
        yaw = yaw_at(p, i)
        label = p.label_for(i)
        smile = EMOTION_SMILES[label]
        gt = _render_frame(size, axes, yaw, m, smile)
        coarse = _render_frame(size, axes, yaw, m * d.expr_damping, smile * d.expr_damping)
        if d.blur_sigma > 0:
            coarse = ndimage.gaussian_filter(coarse, (d.blur_sigma, d.blur_sigma, 0))
        if d.noise_sigma > 0:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((p.seed, i))))
            coarse = coarse + rng.normal(0.0, d.noise_sigma, coarse.shape)
            coarse = np.clip(coarse, 0.0, 1.0)
        pose = np.zeros(d_p)
        pose[0] = yaw
        expr = np.zeros(d_e)
        expr[0], expr[1] = m, smile
        frames.append(
            FrameRecord(
                index=i,
                gt=ImageTensor(gt),
                coarse=ImageTensor(coarse.astype(np.float32)),
                normal=ImageTensor(_render_normal_map(size, axes, yaw)),
                pose=pose,
                expression=expr,
                emotion_label=label,
            )
        )
    return VideoSequence(frames=tuple(frames), fps=p.fps)


# ---------------------------------------------------------------------------
# Oracles: invert the render analytically from pixels alone.

_HEAD_LUM_THRESHOLD = 0.08
_EDGE_CORRECTION = 0.25   # binarization shaves ~this many px off the fitted axes


def _luminance(img: ImageTensor) -> np.ndarray:
    a = img.data
    if a.shape[2] == 1:
        return a[:, :, 0].astype(np.float64)
    return 0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]


def _fit_head(lum: np.ndarray):
    """Center and semi-axes of the head from thresholded, hole-filled mask."""
    mask = lum > _HEAD_LUM_THRESHOLD
    mask = ndimage.binary_fill_holes(mask)
    n = int(mask.sum())
    if n < 20:
        raise OracleError("no head detected (no pixels above luminance threshold)")
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean() + 0.5, ys.mean() + 0.5
    # for a filled ellipse, var_x = a^2/4 (second moments give the axes)
    a = 2.0 * math.sqrt(((xs + 0.5 - cx) ** 2).mean()) + _EDGE_CORRECTION
    b = 2.0 * math.sqrt(((ys + 0.5 - cy) ** 2).mean()) + _EDGE_CORRECTION
    if a < 3.0 or b < 3.0:
        raise OracleError("head region degenerate")
    return cx, cy, a, b


def _measure(img: ImageTensor):
    """Shared oracle core: per-pixel darkness weights in face-sphere coords."""
    lum = _luminance(img)
    cx, cy, a, b = _fit_head(lum)
    size_y, size_x = lum.shape
    ys, xs = np.mgrid[0:size_y, 0:size_x]
    x = (xs + 0.5 - cx) / a
    y = (ys + 0.5 - cy) / b
    r2 = x * x + y * y
    # keep only pixels fully inside the 1 px anti-aliasing ramp: there the
    # render's coverage alpha is exactly 1 and darkness means feature albedo
    alpha_pred = (1.0 - np.sqrt(np.clip(r2, 0.0, None))) * min(a, b)
    interior = (alpha_pred >= 0.999) & (r2 < 0.96)
    x, y, lum_i = x[interior], y[interior], lum[interior]
    z = np.sqrt(np.clip(1.0 - x * x - y * y, 1e-9, None))
    lam = np.arctan2(x, z)
    phi = np.arcsin(np.clip(y, -1.0, 1.0))
    # analytic skin luminance (geometric normal only; the nose bump does not
    # participate in shading)
    nx, ny, nz = _geo_normal(x, y, z, (a, b))
    shade = AMBIENT + DIFFUSE * np.clip(nx * LIGHT[0] + ny * LIGHT[1] + nz * LIGHT[2], 0.0, None)
    lum_pred = np.maximum(ALBEDO_LUM * shade, 1e-3)
    w = np.clip((1.0 - lum_i / lum_pred) / FEATURE_DARKEN, 0.0, 1.0)
    # angular-measure weights: divide out the sphere->image Jacobian
    w_ang = w / np.maximum(np.cos(lam) * np.cos(phi) ** 2, 1e-3)
    return lam, phi, w, w_ang, a, b


def _estimate_yaw(lam, phi, w_ang) -> float:
    eye_w = np.where(phi < -0.08, w_ang, 0.0)
    total = eye_w.sum()
    if total < 1e-3:
        raise OracleError("eye landmarks not found")
    mid = float((eye_w * lam).sum() / total)
    left, right = (lam < mid) & (eye_w > 0), (lam >= mid) & (eye_w > 0)
    wl, wr = eye_w[left].sum(), eye_w[right].sum()
    if wl < 1e-4 or wr < 1e-4:
        return mid
    return 0.5 * (
        float((eye_w[left] * lam[left]).sum() / wl) + float((eye_w[right] * lam[right]).sum() / wr)
    )


def pose_oracle(img: ImageTensor, d_p: int = DEFAULT_POSE_DIM) -> np.ndarray:
    """Estimate the yaw angle from eye-landmark longitudes; zero-padded to d_P."""
    lam, phi, _, w_ang, _, _ = _measure(img)
    pose = np.zeros(d_p)
    pose[0] = _estimate_yaw(lam, phi, w_ang)
    return pose


def expression_oracle(img: ImageTensor, d_e: int = DEFAULT_EXPR_DIM) -> np.ndarray:
    """Estimate (aperture, smile) from the mouth band; zero-padded to d_E.

    Fits the analytic mouth-mask template to the measured darkness field by
    least squares over (aperture, smile, latitude offset). The band's angular
    area seeds the aperture (the smile bend is area neutral by construction).
    """
    lam, phi, w, w_ang, a, b = _measure(img)
    yaw = _estimate_yaw(lam, phi, w_ang)
    sel = phi > 0.0
    if w_ang[sel].sum() < 1e-3:
        raise OracleError("mouth landmarks not found")
    mlam = lam[sel] - yaw
    mphi = phi[sel]
    mw = w[sel]
    area = w_ang[sel].sum() / (a * b)
    m0 = max((area / (4.0 * MOUTH_HALF_W) - MOUTH_H0) / MOUTH_H_GAIN, 0.0)
    eps = 1.5 / a

    def objective(p):
        tmpl = _mouth_mask(mlam, mphi - p[2], p[0], p[1], eps)
        return float(((mw - tmpl) ** 2).sum())

    best = None
    for s0 in (-0.6, 0.0, 0.6):
        res = minimize(objective, np.array([m0, s0, 0.0]), method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    expr = np.zeros(d_e)
    expr[0], expr[1] = float(best.x[0]), float(best.x[1])
    return expr
