"""Ancestral sampler and the inference entry points built on it."""

import numpy as np

from ..errors import OracleError
from ..imagecore import FrameRecord, ImageTensor, VideoSequence
from ..conditioning import EmotionDatabase, build_zc, embed_emotion, select_emotion
from ..nn import Tensor
from ..tsd import TSDConfig, TSDMap, default_cutoff, extract_tsd
from .schedule import NoiseSchedule
from .stages import (
    DetailStage,
    TSDAlignStage,
    image_to_model,
    model_to_image,
    model_to_tsd,
    tsd_to_model,
)


def _timestep_pairs(T: int, steps: int):
    """Uniformly strided (t, previous) pairs from T down to 0."""
    grid = [int(np.floor(i * T / steps)) for i in range(steps + 1)]
    return [(grid[i + 1], grid[i]) for i in range(steps - 1, -1, -1)]


def sample_loop(predict, sched: NoiseSchedule, shape: tuple,
                rng: np.random.Generator, steps: int | None = None,
                literal_update: bool = False, clip_x0: bool = True) -> np.ndarray:
    """Reverse process from seeded noise to a model-space sample.

    predict(x, t) must return the predicted noise for batch x at timestep t.
    The posterior update is the standard ancestral rule from the predicted
    clean sample; literal_update instead applies the plain subtraction
    x <- x - eps_hat at every step (a much cruder rule, kept for comparison).
    """
    steps = sched.T if steps is None else int(steps)
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in 1..{sched.T}, got {steps}")
    x = rng.standard_normal(shape).astype(np.float32)
    for t, s in _timestep_pairs(sched.T, steps):
        eps = predict(x, t)
        if literal_update:
            x = x - eps
            continue
        ab_t = sched.alpha[t] ** 2
        ab_s = sched.alpha[s] ** 2
        x0 = (x - np.float32(np.sqrt(1.0 - ab_t)) * eps) / np.float32(np.sqrt(ab_t))
        if clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
        if s == 0:
            x = x0
            continue
        b_eff = 1.0 - ab_t / ab_s
        c0 = np.sqrt(ab_s) * b_eff / (1.0 - ab_t)
        ct = np.sqrt(ab_t / ab_s) * (1.0 - ab_s) / (1.0 - ab_t)
        var = b_eff * (1.0 - ab_s) / (1.0 - ab_t)
        noise = rng.standard_normal(shape).astype(np.float32)
        x = (np.float32(c0) * x0 + np.float32(ct) * x
             + np.float32(np.sqrt(var)) * noise)
    return x


def align_tsd(stage: TSDAlignStage, coarse_tsd: TSDMap, pose: np.ndarray,
              expr: np.ndarray, steps: int | None = None, seed: int = 0,
              literal_update: bool = False) -> TSDMap:
    """Map a coarse frame's detail map to a denoised, target-like one."""
    if not isinstance(stage, TSDAlignStage):
        raise TypeError("align_tsd needs a TSDAlignStage")
    size = stage.cfg.image_size
    if coarse_tsd.data.shape[:2] != (size, size):
        raise ValueError(f"detail map is {coarse_tsd.data.shape[:2]}, stage expects "
                         f"{size}x{size}")
    coarse_m = tsd_to_model(coarse_tsd.data)[None]
    f = stage.context(Tensor(coarse_m),
                      Tensor(np.asarray(pose, dtype=np.float32)[None]),
                      Tensor(np.asarray(expr, dtype=np.float32)[None])).data

    def predict(x, t):
        temb = stage.net.time_embedding(np.array([t]))
        return stage.predict(Tensor(x), Tensor(coarse_m), temb, Tensor(f)).data

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = sample_loop(predict, stage.schedule, (1, size, size, 3), rng,
                      steps=steps, literal_update=literal_update)
    return TSDMap(model_to_tsd(out[0]))


def sample_frame(stage: DetailStage, f: np.ndarray, z_raw: np.ndarray,
                 steps: int | None = None, seed: int = 0,
                 literal_update: bool = False) -> ImageTensor:
    """Generate one frame from a context block and a raw spatial condition."""
    if not isinstance(stage, DetailStage):
        raise TypeError("sample_frame needs a DetailStage")
    size = stage.cfg.image_size
    z_m = stage.spatial(z_raw[None])

    def predict(x, t):
        temb = stage.net.time_embedding(np.array([t]))
        return stage.predict(Tensor(x), temb, Tensor(f[None]), Tensor(z_m)).data

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = sample_loop(predict, stage.schedule, (1, size, size, 3), rng,
                      steps=steps, literal_update=literal_update)
    return ImageTensor(model_to_image(out[0]))


sample_image = sample_frame


def _frame_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, index, stream)).generate_state(1)[0])


def synthesize_sequence(detail_stage: DetailStage, align_stage: TSDAlignStage,
                        coarse_sequence: VideoSequence, db: EmotionDatabase,
                        steps: int | None = None, seed: int = 0) -> VideoSequence:
    """Generate a full sequence from coarse frames and their coefficients.

    Per frame: retrieve the emotion from the coarse render, align its detail
    map, then denoise the final frame under the full conditioning. The result
    keeps the coarse/normal inputs and stores the generated image as gt.
    """
    cfg = detail_stage.cfg
    tsd_cfg = TSDConfig(default_cutoff(cfg.image_size))
    frames = []
    for fr in coarse_sequence.frames:
        try:
            label = select_emotion(fr.coarse, db)
            emotion = embed_emotion(label)
        except (OracleError, KeyError) as e:
            raise type(e)(f"frame {fr.index}: {e}") from e
        coarse_tsd = extract_tsd(fr.coarse, tsd_cfg)
        source_tsd = coarse_tsd
        if cfg.use_aligned_tsd:
            source_tsd = align_tsd(align_stage, coarse_tsd, fr.pose, fr.expression,
                                   steps=steps, seed=_frame_seed(seed, fr.index, 0))
        f = detail_stage.context(
            Tensor(tsd_to_model(source_tsd.data)[None]),
            Tensor(np.asarray(fr.pose, dtype=np.float32)[None]),
            Tensor(np.asarray(fr.expression, dtype=np.float32)[None]),
            Tensor(emotion[None])).data[0]
        z_raw = build_zc(fr.normal, source_tsd)
        img = sample_frame(detail_stage, f, z_raw, steps=steps,
                           seed=_frame_seed(seed, fr.index, 1))
        frames.append(FrameRecord(index=fr.index, gt=img, coarse=fr.coarse,
                                  normal=fr.normal, pose=fr.pose,
                                  expression=fr.expression, emotion_label=label))
    return VideoSequence(frames=tuple(frames), fps=coarse_sequence.fps)
