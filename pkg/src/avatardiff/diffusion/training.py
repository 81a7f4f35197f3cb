"""Noise-prediction trainers for both stages.

Both stages train the same way: draw frames, timesteps, and noise, form x_t,
and regress the predicted noise onto the drawn noise with mean-squared error.
Every random draw of iteration i comes from a generator seeded by (seed, i),
so a run can be stopped and resumed, or re-run, with identical results.
"""

from dataclasses import dataclass

import numpy as np

from ..conditioning import EmotionDatabase, build_zc, embed_emotion
from ..errors import ConfigError
from ..imagecore import VideoSequence
from ..nn import Adam, Tensor
from ..tsd import TSDConfig, default_cutoff, extract_tsd
from .sampling import _frame_seed, align_tsd
from .stages import (
    DetailStage,
    StageConfig,
    TSDAlignStage,
    image_to_model,
    tsd_to_model,
)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    align_steps: int = 25   # reverse steps when preparing aligned detail maps
    log_every: int = 0      # 0: silent

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.align_steps < 1:
            raise ConfigError("align_steps must be >= 1")


@dataclass
class TrainResult:
    stage: object
    optimizer: Adam
    losses: np.ndarray


def _iter_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, it, 1))))


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0, 0))))


def _check_dataset(dataset: VideoSequence):
    if not dataset.frames:
        raise ValueError("training dataset has no frames")
    return dataset.frames[0].gt.shape[0]


def _run_loop(cfg: TrainConfig, stage, optimizer, start: int, num_frames: int,
              make_batch):
    """Shared iteration schedule; make_batch(idx, t, eps, rng) returns the loss."""
    sched = stage.schedule
    losses = []
    for it in range(start, cfg.iterations):
        rng = _iter_rng(cfg.seed, it)
        idx = rng.integers(0, num_frames, size=cfg.batch_size)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        size = stage.cfg.image_size
        eps = rng.standard_normal((cfg.batch_size, size, size, 3)).astype(np.float32)
        stage.zero_grad()
        loss = make_batch(idx, t, eps)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.data))
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            print(f"iter {it + 1}/{cfg.iterations} loss {losses[-1]:.5f}")
    return np.asarray(losses, dtype=np.float64)


def _noisy(sched, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    a = sched.alpha[t].astype(np.float32)[:, None, None, None]
    s = sched.noise_scale[t].astype(np.float32)[:, None, None, None]
    return a * x0 + s * eps


def train_tsdm(dataset: VideoSequence, cfg: TrainConfig,
               stage_cfg: StageConfig | None = None,
               resume: dict | None = None) -> TrainResult:
    """Train the detail-map alignment stage on (coarse, ground-truth) pairs."""
    size = _check_dataset(dataset)
    if stage_cfg is None:
        stage_cfg = StageConfig(kind="tsd_align", image_size=size)
    tsd_cfg = TSDConfig(default_cutoff(size))
    x0 = np.stack([tsd_to_model(extract_tsd(fr.gt, tsd_cfg).data) for fr in dataset.frames])
    cond = np.stack([tsd_to_model(extract_tsd(fr.coarse, tsd_cfg).data)
                     for fr in dataset.frames])
    pose = np.stack([fr.pose for fr in dataset.frames]).astype(np.float32)
    expr = np.stack([fr.expression for fr in dataset.frames]).astype(np.float32)

    if resume is not None:
        stage = resume["stage"]
        if not isinstance(stage, TSDAlignStage):
            raise ConfigError("resume checkpoint is not an alignment stage")
        optimizer = Adam(stage.parameters(), lr=cfg.lr)
        if resume.get("optimizer_state"):
            optimizer.load_state_dict(resume["optimizer_state"])
        start = int(resume.get("step", 0))
    else:
        stage = TSDAlignStage(stage_cfg, _init_rng(cfg.seed))
        optimizer = Adam(stage.parameters(), lr=cfg.lr)
        start = 0
    if stage.cfg.image_size != size:
        raise ConfigError(f"stage expects {stage.cfg.image_size} px frames, "
                          f"dataset has {size} px")

    def make_batch(idx, t, eps):
        x_t = Tensor(_noisy(stage.schedule, x0[idx], t, eps))
        coarse_b = Tensor(cond[idx])
        f = stage.context(coarse_b, Tensor(pose[idx]), Tensor(expr[idx]))
        temb = stage.net.time_embedding(t)
        diff = stage.predict(x_t, coarse_b, temb, f) - Tensor(eps)
        return (diff * diff).mean()

    losses = _run_loop(cfg, stage, optimizer, start, len(dataset.frames), make_batch)
    return TrainResult(stage=stage, optimizer=optimizer, losses=losses)


def train_fcsd(dataset: VideoSequence, align_stage: TSDAlignStage | None,
               db: EmotionDatabase | None, cfg: TrainConfig,
               stage_cfg: StageConfig | None = None,
               resume: dict | None = None) -> TrainResult:
    """Train the frame stage; conditions are prepared once, up front.

    The detail-map condition is the aligned map produced by align_stage
    (or the raw coarse map under the use_aligned_tsd=False ablation, in
    which case align_stage may be None).
    """
    size = _check_dataset(dataset)
    if resume is not None:
        stage = resume["stage"]
        if not isinstance(stage, DetailStage):
            raise ConfigError("resume checkpoint is not a frame stage")
        optimizer = Adam(stage.parameters(), lr=cfg.lr)
        if resume.get("optimizer_state"):
            optimizer.load_state_dict(resume["optimizer_state"])
        start = int(resume.get("step", 0))
    else:
        if stage_cfg is None:
            stage_cfg = StageConfig(kind="detail", image_size=size)
        stage = DetailStage(stage_cfg, _init_rng(cfg.seed))
        optimizer = Adam(stage.parameters(), lr=cfg.lr)
        start = 0
    stage_cfg = stage.cfg
    if stage_cfg.image_size != size:
        raise ConfigError(f"stage expects {stage_cfg.image_size} px frames, "
                          f"dataset has {size} px")
    if stage_cfg.use_aligned_tsd and align_stage is None:
        raise ConfigError("aligned detail maps requested but no alignment stage given")
    if db is not None:
        missing = {fr.emotion_label for fr in dataset.frames} - set(db.labels)
        if missing:
            raise ConfigError(f"dataset labels missing from emotion database: "
                              f"{sorted(missing)}")
    tsd_cfg = TSDConfig(default_cutoff(size))

    x0_l, tsd_m_l, z_raw_l, emo_l = [], [], [], []
    for fr in dataset.frames:
        coarse_tsd = extract_tsd(fr.coarse, tsd_cfg)
        source = coarse_tsd
        if stage_cfg.use_aligned_tsd:
            source = align_tsd(align_stage, coarse_tsd, fr.pose, fr.expression,
                               steps=cfg.align_steps,
                               seed=_frame_seed(cfg.seed, fr.index, 2))
        x0_l.append(image_to_model(fr.gt.data))
        tsd_m_l.append(tsd_to_model(source.data))
        z_raw_l.append(build_zc(fr.normal, source))
        emo_l.append(embed_emotion(fr.emotion_label))
    x0 = np.stack(x0_l)
    tsd_m = np.stack(tsd_m_l)
    emo = np.stack(emo_l)
    pose = np.stack([fr.pose for fr in dataset.frames]).astype(np.float32)
    expr = np.stack([fr.expression for fr in dataset.frames]).astype(np.float32)
    z_m_all = stage.spatial(np.stack(z_raw_l))

    def make_batch(idx, t, eps):
        x_t = Tensor(_noisy(stage.schedule, x0[idx], t, eps))
        f = stage.context(Tensor(tsd_m[idx]), Tensor(pose[idx]), Tensor(expr[idx]),
                          Tensor(emo[idx]))
        temb = stage.net.time_embedding(t)
        diff = stage.predict(x_t, temb, f, Tensor(z_m_all[idx])) - Tensor(eps)
        return (diff * diff).mean()

    losses = _run_loop(cfg, stage, optimizer, start, len(dataset.frames), make_batch)
    return TrainResult(stage=stage, optimizer=optimizer, losses=losses)
