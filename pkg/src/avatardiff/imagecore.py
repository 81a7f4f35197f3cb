"""Image / video-sequence data model and lossless dataset I/O.

Images live in memory as float arrays in [0, 1] (intermediates may leave the
range); quantization to 8-bit happens only when frames are written as PNG.
A sequence on disk is a directory of PNGs plus one JSON manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ManifestError

MANIFEST_VERSION = "v1"
MANIFEST_NAME = "manifest.json"

DEFAULT_POSE_DIM = 6
DEFAULT_EXPR_DIM = 100


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C image, C in {1, 3}, row-major float32 data."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWxC with C in (1,3), got shape {a.shape}")
        h, w = a.shape[:2]
        if h < 8 or w < 8 or (h & (h - 1)) or (w & (w - 1)):
            raise ValueError(f"image sides must be powers of two >= 8, got {h}x{w}")
        if not np.isfinite(a).all():
            raise ValueError("image contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class FrameRecord:
    """One frame: ground truth, coarse proxy, normal map, and its coefficients."""

    index: int
    gt: ImageTensor
    coarse: ImageTensor
    normal: ImageTensor
    pose: np.ndarray
    expression: np.ndarray
    emotion_label: str

    def __post_init__(self):
        if not (self.gt.shape == self.coarse.shape == self.normal.shape):
            raise ValueError(
                f"frame {self.index}: gt/coarse/normal dimensions differ: "
                f"{self.gt.shape} / {self.coarse.shape} / {self.normal.shape}"
            )
        for name in ("pose", "expression"):
            v = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if not np.isfinite(v).all():
                raise ValueError(f"frame {self.index}: non-finite {name} vector")
            v.setflags(write=False)
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class VideoSequence:
    """Ordered frames with contiguous indices 0..K-1, K >= 2."""

    frames: tuple
    fps: float
    manifest_path: str | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError(f"sequence needs K >= 2 frames, got {len(frames)}")
        for k, fr in enumerate(frames):
            if fr.index != k:
                raise ValueError(f"frame indices must be 0..K-1 contiguous; position {k} has index {fr.index}")
        shape = frames[0].gt.shape
        if any(fr.gt.shape != shape for fr in frames):
            raise ValueError("all frames in a sequence must share one (H, W, C)")
        dp = len(frames[0].pose)
        de = len(frames[0].expression)
        if any(len(fr.pose) != dp or len(fr.expression) != de for fr in frames):
            raise ValueError("pose/expression lengths must be uniform across the sequence")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def pose_dim(self) -> int:
        return len(self.frames[0].pose)

    @property
    def expression_dim(self) -> int:
        return len(self.frames[0].expression)

    @property
    def image_shape(self):
        return self.frames[0].gt.shape


def to_uint8(img: ImageTensor) -> np.ndarray:
    """Quantize to 8 bit, clamping to [0, 1]. The write-out boundary."""
    return np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(a: np.ndarray) -> ImageTensor:
    return ImageTensor(a.astype(np.float32) / 255.0)


def write_png(img: ImageTensor, path: str) -> None:
    a = to_uint8(img)
    pil = Image.fromarray(a[:, :, 0], mode="L") if a.shape[2] == 1 else Image.fromarray(a, mode="RGB")
    try:
        pil.save(path, format="PNG")
    except OSError as e:
        raise OSError(f"failed writing PNG {path}: {e}") from e


def read_png(path: str) -> ImageTensor:
    try:
        with Image.open(path) as pil:
            pil.load()
            if pil.mode not in ("L", "RGB"):
                pil = pil.convert("RGB")
            a = np.asarray(pil)
    except FileNotFoundError:
        raise ManifestError(f"referenced frame file is missing: {path}") from None
    except OSError as e:
        raise OSError(f"failed reading PNG {path}: {e}") from e
    if a.ndim == 2:
        a = a[:, :, None]
    return from_uint8(a)


def write_sequence(seq: VideoSequence, dir: str, config_hash: str | None = None) -> str:
    """Write frames as lossless PNGs plus a JSON manifest; returns the manifest path."""
    os.makedirs(dir, exist_ok=True)
    records = []
    for fr in seq.frames:
        names = {}
        for kind in ("gt", "coarse", "normal"):
            name = f"{kind}_{fr.index:05d}.png"
            write_png(getattr(fr, kind), os.path.join(dir, name))
            names[kind] = name
        records.append(
            {
                "index": fr.index,
                "gt": names["gt"],
                "coarse": names["coarse"],
                "normal": names["normal"],
                "pose": [float(x) for x in fr.pose],
                "expression": [float(x) for x in fr.expression],
                "emotion": fr.emotion_label,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "fps": float(seq.fps),
        "d_P": seq.pose_dim,
        "d_E": seq.expression_dim,
        "frames": records,
    }
    if config_hash is not None:
        manifest["config_hash"] = config_hash
    path = os.path.join(dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(dir: str) -> dict:
    path = os.path.join(dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ManifestError(f"no {MANIFEST_NAME} in {dir}")
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e
    for key in ("version", "fps", "d_P", "d_E", "frames"):
        if key not in manifest:
            raise ManifestError(f"manifest {path} lacks required key '{key}'")
    return manifest


def read_sequence(dir: str) -> VideoSequence:
    """Load a sequence written by write_sequence, enforcing all type invariants."""
    manifest = read_manifest(dir)
    d_p, d_e = manifest["d_P"], manifest["d_E"]
    frames = []
    for rec in manifest["frames"]:
        try:
            pose = np.asarray(rec["pose"], dtype=np.float64)
            expr = np.asarray(rec["expression"], dtype=np.float64)
            if len(pose) != d_p:
                raise ManifestError(
                    f"frame {rec['index']}: pose length {len(pose)} != manifest d_P {d_p}"
                )
            if len(expr) != d_e:
                raise ManifestError(
                    f"frame {rec['index']}: expression length {len(expr)} != manifest d_E {d_e}"
                )
            frames.append(
                FrameRecord(
                    index=rec["index"],
                    gt=read_png(os.path.join(dir, rec["gt"])),
                    coarse=read_png(os.path.join(dir, rec["coarse"])),
                    normal=read_png(os.path.join(dir, rec["normal"])),
                    pose=pose,
                    expression=expr,
                    emotion_label=rec["emotion"],
                )
            )
        except KeyError as e:
            raise ManifestError(f"manifest frame record lacks key {e}") from e
    try:
        return VideoSequence(
            frames=tuple(frames), fps=manifest["fps"], manifest_path=os.path.join(dir, MANIFEST_NAME)
        )
    except ValueError as e:
        raise ManifestError(f"manifest {dir} violates sequence invariants: {e}") from e


def sequence_config_hash(dir: str) -> str | None:
    return read_manifest(dir).get("config_hash")
