"""The two trainable denoising stages and their checkpoint format.

Stage one (TSDAlignStage) denoises detail maps: it receives the noisy target
detail map stacked channel-wise with the coarse frame's detail map and is
conditioned through cross-attention on [detail code, pose, expression].

Stage two (DetailStage) denoises full frames: cross-attention conditioning
gains an emotion row, and a control branch injects the spatial condition
(normal map channels, then detail map channels).

Model space: images live in [-1, 1] (x*2-1), detail maps are scaled by 2.
"""

import dataclasses
import hashlib
import json
import pathlib
from dataclasses import dataclass

import numpy as np

from ..conditioning import TSDEncoder, VectorProjector, stack_code_rows
from ..errors import ConfigError
from ..nn import Module, Tensor, concat
from ..nn.unet import ControlBranch, DenoiserConfig, DenoiserNet
from .schedule import DEFAULT_T, NoiseSchedule, make_schedule

STAGE_KINDS = ("tsd_align", "detail")


def image_to_model(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32) * 2.0 - 1.0


def model_to_image(a: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(a, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)


def tsd_to_model(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32) * 2.0


def model_to_tsd(a: np.ndarray) -> np.ndarray:
    """Inverse detail-map scaling; re-centers channels so the result is a
    valid zero-mean detail map even when the sampler drifts slightly."""
    b = np.asarray(a, dtype=np.float32) / 2.0
    return b - b.mean(axis=(0, 1), keepdims=True, dtype=np.float64).astype(np.float32)


@dataclass(frozen=True)
class StageConfig:
    kind: str
    image_size: int = 64
    widths: tuple = (8, 16, 32)
    t_dim: int = 64
    ctx_dim: int = 256
    heads: int = 4
    groups: int = 4
    null_tokens: int = 4
    schedule_steps: int = DEFAULT_T
    d_pose: int = 6
    d_expr: int = 100
    d_emotion: int = 768
    enc_widths: tuple = (8, 16, 32, 64)
    # detail-stage condition switches; architecture is unchanged, the
    # corresponding inputs are zeroed, so trained variants stay comparable
    use_aligned_tsd: bool = True
    use_normal: bool = True
    use_emotion: bool = True

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"unknown stage kind '{self.kind}'")
        s = self.image_size
        if s < 8 or (s & (s - 1)):
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.schedule_steps < 2:
            raise ConfigError("schedule_steps must be >= 2")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "enc_widths", tuple(int(w) for w in self.enc_widths))

    @property
    def context_rows(self) -> int:
        return 3 if self.kind == "tsd_align" else 4


def stage_config_hash(cfg: StageConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _denoiser_config(cfg: StageConfig, in_channels: int) -> DenoiserConfig:
    return DenoiserConfig(in_channels=in_channels, out_channels=3, widths=cfg.widths,
                          t_dim=cfg.t_dim, ctx_dim=cfg.ctx_dim, heads=cfg.heads,
                          groups=cfg.groups, null_tokens=cfg.null_tokens)


class TSDAlignStage(Module):
    """Denoises a detail map conditioned on the coarse frame's detail map."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator):
        if cfg.kind != "tsd_align":
            raise ConfigError(f"TSDAlignStage requires kind 'tsd_align', got '{cfg.kind}'")
        self.cfg = cfg
        self.net = DenoiserNet(_denoiser_config(cfg, in_channels=6), rng)
        self.tsd_encoder = TSDEncoder(rng, cfg.image_size, cfg.ctx_dim,
                                      widths=cfg.enc_widths, groups=cfg.groups)
        self.projector = VectorProjector(rng, cfg.ctx_dim,
                                         {"pose": cfg.d_pose, "expression": cfg.d_expr})
        self.schedule = make_schedule(cfg.schedule_steps)

    def context(self, coarse_tsd_m: Tensor, pose: Tensor, expr: Tensor) -> Tensor:
        rows = [self.tsd_encoder(coarse_tsd_m),
                self.projector(pose, "pose"),
                self.projector(expr, "expression")]
        return stack_code_rows(rows)

    def predict(self, x_t: Tensor, coarse_tsd_m: Tensor, temb: Tensor,
                f: Tensor | None) -> Tensor:
        if f is not None and f.shape[1] != self.cfg.context_rows:
            raise ValueError(f"expected {self.cfg.context_rows} context rows, "
                             f"got {f.shape[1]}")
        # At high noise the target approaches x_t itself; predicting the
        # correction keeps that regime exact under the zero-init output head.
        return self.net(concat([x_t, coarse_tsd_m], axis=-1), temb, f) + x_t


class DetailStage(Module):
    """Denoises full frames under code-block and spatial conditioning."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator):
        if cfg.kind != "detail":
            raise ConfigError(f"DetailStage requires kind 'detail', got '{cfg.kind}'")
        self.cfg = cfg
        base = _denoiser_config(cfg, in_channels=3)
        self.net = DenoiserNet(base, rng)
        self.control = ControlBranch(cond_channels=6, cfg=base, rng=rng)
        self.tsd_encoder = TSDEncoder(rng, cfg.image_size, cfg.ctx_dim,
                                      widths=cfg.enc_widths, groups=cfg.groups)
        self.projector = VectorProjector(
            rng, cfg.ctx_dim, {"pose": cfg.d_pose, "expression": cfg.d_expr,
                               "emotion": cfg.d_emotion})
        self.schedule = make_schedule(cfg.schedule_steps)

    def context(self, tsd_m: Tensor, pose: Tensor, expr: Tensor,
                emotion: Tensor) -> Tensor:
        emo_row = self.projector(emotion, "emotion")
        if not self.cfg.use_emotion:
            emo_row = emo_row * 0.0
        rows = [self.tsd_encoder(tsd_m),
                self.projector(pose, "pose"),
                self.projector(expr, "expression"),
                emo_row]
        return stack_code_rows(rows)

    def spatial(self, z_raw: np.ndarray) -> np.ndarray:
        """Model-space spatial condition from a raw (normal | detail) block.

        Input layout is the public contract: first three channels the normal
        map in [0,1], last three the detail map. Normal channels are zeroed
        when the stage is configured without the normal condition.
        """
        z = np.asarray(z_raw, dtype=np.float32)
        if z.shape[-1] != 6:
            raise ValueError(f"spatial condition needs 6 channels, got {z.shape[-1]}")
        normal_m = image_to_model(z[..., :3])
        if not self.cfg.use_normal:
            normal_m = np.zeros_like(normal_m)
        return np.concatenate([normal_m, tsd_to_model(z[..., 3:])], axis=-1)

    def predict(self, x_t: Tensor, temb: Tensor, f: Tensor | None,
                z: Tensor | None) -> Tensor:
        if f is not None and f.shape[1] != self.cfg.context_rows:
            raise ValueError(f"expected {self.cfg.context_rows} context rows, "
                             f"got {f.shape[1]}")
        control = self.control(x_t, z, temb) if z is not None else None
        # Correction form, same reasoning as the alignment stage.
        return self.net(x_t, temb, f, control) + x_t


def _build_stage(cfg: StageConfig, rng=None) -> Module:
    rng = rng if rng is not None else np.random.default_rng(0)
    cls = TSDAlignStage if cfg.kind == "tsd_align" else DetailStage
    return cls(cfg, rng)


def save_stage(path, stage: Module, optimizer=None, rng: np.random.Generator | None = None,
               step: int = 0, losses=None):
    """Self-describing checkpoint: config + weights + optimizer + RNG state."""
    cfg = stage.cfg
    meta = {
        "config": dataclasses.asdict(cfg),
        "config_hash": stage_config_hash(cfg),
        "step": int(step),
        "rng_state": json.dumps(rng.bit_generator.state) if rng is not None else None,
        "has_optimizer": optimizer is not None,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for k, v in stage.state_dict().items():
        arrays[f"w::{k}"] = v
    if optimizer is not None:
        for k, v in optimizer.state_dict().items():
            arrays[f"o::{k}"] = np.asarray(v)
    arrays["losses"] = np.asarray([] if losses is None else losses, dtype=np.float64)
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_stage(path, expected_config: StageConfig | None = None) -> dict:
    """Rebuild a stage from a checkpoint; refuses configs that do not match.

    Returns {stage, config, step, losses, optimizer_state, rng}.
    """
    path = pathlib.Path(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"][()]))
        raw = dict(meta["config"])
        for key in ("widths", "enc_widths"):
            raw[key] = tuple(raw[key])
        cfg = StageConfig(**raw)
        if stage_config_hash(cfg) != meta["config_hash"]:
            raise ConfigError(f"checkpoint {path.name}: config hash mismatch "
                              f"(file corrupt or written by an incompatible version)")
        if expected_config is not None and expected_config != cfg:
            raise ConfigError(f"checkpoint {path.name}: stored config differs from "
                              f"the expected one")
        stage = _build_stage(cfg)
        stage.load_state_dict({k[3:]: data[k] for k in data.files if k.startswith("w::")})
        opt_state = None
        if meta["has_optimizer"]:
            opt_state = {k[3:]: data[k] for k in data.files if k.startswith("o::")}
        rng = None
        if meta["rng_state"] is not None:
            rng = np.random.Generator(np.random.PCG64())
            rng.bit_generator.state = json.loads(meta["rng_state"])
        return {"stage": stage, "config": cfg, "step": meta["step"],
                "losses": data["losses"].copy(), "optimizer_state": opt_state,
                "rng": rng}
