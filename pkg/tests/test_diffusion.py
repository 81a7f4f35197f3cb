import numpy as np
import pytest

from avatardiff.conditioning import EmotionDatabase, build_emotion_database
from avatardiff.diffusion import (
    StageConfig,
    TrainConfig,
    align_tsd,
    forward_diffuse,
    load_stage,
    make_schedule,
    sample_loop,
    save_stage,
    synthesize_sequence,
    train_fcsd,
    train_tsdm,
)
from avatardiff.diffusion.sampling import _timestep_pairs, sample_frame
from avatardiff.diffusion.stages import DetailStage, TSDAlignStage, model_to_tsd
from avatardiff.errors import ConfigError
from avatardiff.nn import Tensor
from avatardiff.synthgen import SceneParams, render_scene
from avatardiff.tsd import TSDConfig, default_cutoff, extract_tsd


def _scene(size=32, frames=4, seed=3):
    return render_scene(SceneParams(image_size=size, num_frames=frames, seed=seed))


def _tsd_of(img, size):
    return extract_tsd(img, TSDConfig(default_cutoff(size)))


SMALL_TSDM = StageConfig(kind="tsd_align", image_size=32, schedule_steps=50)
SMALL_FCSD = StageConfig(kind="detail", image_size=32, schedule_steps=50)
FAST = TrainConfig(iterations=4, batch_size=2, lr=1e-3, seed=0, align_steps=4)


class TestSchedule:
    @pytest.mark.parametrize("T", [50, 200, 1000])
    def test_invariants(self, T):
        s = make_schedule(T)
        assert s.alpha.shape == (T + 1,)
        assert s.alpha[0] == 1.0
        assert (np.diff(s.alpha) < 0).all()
        assert s.alpha[-1] <= 0.05
        assert (np.diff(s.noise_scale) > 0).all()

    def test_too_few_steps(self):
        with pytest.raises(ValueError, match="at least 2"):
            make_schedule(1)

    def test_very_coarse_schedule_stays_valid(self):
        s = make_schedule(2)
        assert (s.beta < 1.0).all()
        assert s.alpha[-1] <= 0.05

    def test_rejects_bad_arrays(self):
        from avatardiff.diffusion.schedule import NoiseSchedule
        good = make_schedule(10)
        with pytest.raises(ValueError, match="exactly 1"):
            NoiseSchedule(T=10, alpha=good.alpha * 0.5, beta=good.beta)
        increasing = good.alpha.copy()
        increasing[3], increasing[4] = increasing[4], increasing[3]
        with pytest.raises(ValueError, match="strictly decreasing"):
            NoiseSchedule(T=10, alpha=increasing, beta=good.beta)


class TestForwardDiffuse:
    def test_t_zero_is_identity(self):
        s = make_schedule(50)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((4, 4, 3)).astype(np.float32)
        eps = rng.standard_normal((4, 4, 3)).astype(np.float32)
        assert np.array_equal(forward_diffuse(x0, 0, eps, s), x0)

    def test_matches_closed_form(self):
        s = make_schedule(50)
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((4, 4, 3)).astype(np.float32)
        eps = rng.standard_normal((4, 4, 3)).astype(np.float32)
        t = 20
        want = np.float32(s.alpha[t]) * x0 + np.float32(np.sqrt(1 - s.alpha[t] ** 2)) * eps
        assert np.allclose(forward_diffuse(x0, t, eps, s), want, atol=1e-7)

    def test_out_of_range_timestep(self):
        s = make_schedule(50)
        x = np.zeros((2, 2, 3), dtype=np.float32)
        with pytest.raises(IndexError):
            forward_diffuse(x, 51, x, s)
        with pytest.raises(IndexError):
            forward_diffuse(x, -1, x, s)

    def test_shape_mismatch(self):
        s = make_schedule(50)
        with pytest.raises(ValueError, match="shape"):
            forward_diffuse(np.zeros((2, 2, 3)), 1, np.zeros((2, 2, 1)), s)

    def test_noise_variance_monte_carlo(self):
        # light version of the statistical contract: fixed x0, many draws,
        # empirical variance must be 1 - alpha^2
        s = make_schedule(200)
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((8, 8, 3)).astype(np.float32)
        t = 100
        draws = np.stack([forward_diffuse(x0, t, rng.standard_normal(x0.shape).astype(np.float32), s)
                          for _ in range(2000)])
        var = draws.var(axis=0).mean()
        expect = 1.0 - s.alpha[t] ** 2
        assert abs(var - expect) / expect < 0.05


class TestTimestepStriding:
    def test_full_chain(self):
        pairs = _timestep_pairs(5, 5)
        assert pairs == [(5, 4), (4, 3), (3, 2), (2, 1), (1, 0)]

    def test_strided_covers_endpoints(self):
        pairs = _timestep_pairs(200, 10)
        assert pairs[0][0] == 200
        assert pairs[-1][1] == 0
        ts = [t for t, _ in pairs]
        assert ts == sorted(ts, reverse=True)
        assert len(set(ts)) == len(ts)


class TestSampleLoop:
    def _sched(self):
        return make_schedule(20)

    def test_deterministic(self):
        s = self._sched()
        predict = lambda x, t: 0.1 * x
        a = sample_loop(predict, s, (1, 4, 4, 3), np.random.default_rng(5))
        b = sample_loop(predict, s, (1, 4, 4, 3), np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_steps_validation(self):
        s = self._sched()
        with pytest.raises(ValueError, match="steps"):
            sample_loop(lambda x, t: x, s, (1, 4, 4, 3), np.random.default_rng(0), steps=0)
        with pytest.raises(ValueError, match="steps"):
            sample_loop(lambda x, t: x, s, (1, 4, 4, 3), np.random.default_rng(0), steps=21)

    def test_literal_update_differs(self):
        s = self._sched()
        predict = lambda x, t: 0.1 * x
        a = sample_loop(predict, s, (1, 4, 4, 3), np.random.default_rng(5))
        b = sample_loop(predict, s, (1, 4, 4, 3), np.random.default_rng(5),
                        literal_update=True)
        assert not np.array_equal(a, b)

    def test_perfect_predictor_recovers_target(self):
        # if eps_hat inverts the forward process for a fixed target, the
        # sampler must walk back to that target
        s = make_schedule(200)
        target = np.full((1, 4, 4, 3), 0.5, dtype=np.float32)

        def predict(x, t):
            a = np.float32(s.alpha[t])
            sc = np.float32(np.sqrt(1 - s.alpha[t] ** 2))
            return (x - a * target) / sc

        out = sample_loop(predict, s, target.shape, np.random.default_rng(0))
        assert np.abs(out - target).max() < 0.05


class TestStageZeroInit:
    def test_alignment_stage_condition_inert_at_init(self):
        stage = TSDAlignStage(SMALL_TSDM, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 32, 32, 3)).astype(np.float32))
        c = Tensor(rng.standard_normal((2, 32, 32, 3)).astype(np.float32))
        pose = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
        expr = Tensor(rng.standard_normal((2, 100)).astype(np.float32))
        temb = stage.net.time_embedding(np.array([3, 7]))
        f = stage.context(c, pose, expr)
        with_f = stage.predict(x, c, temb, f)
        without = stage.predict(x, c, temb, None)
        assert with_f.data.tobytes() == without.data.tobytes()

    def test_detail_stage_control_inert_at_init(self):
        stage = DetailStage(SMALL_FCSD, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 32, 32, 3)).astype(np.float32))
        z = Tensor(rng.standard_normal((2, 32, 32, 6)).astype(np.float32))
        temb = stage.net.time_embedding(np.array([3, 7]))
        with_z = stage.predict(x, temb, None, z)
        without = stage.predict(x, temb, None, None)
        assert with_z.data.tobytes() == without.data.tobytes()

    def test_context_row_count_enforced(self):
        stage = TSDAlignStage(SMALL_TSDM, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 32, 32, 3)).astype(np.float32))
        c = Tensor(rng.standard_normal((1, 32, 32, 3)).astype(np.float32))
        temb = stage.net.time_embedding(np.array([3]))
        bad = Tensor(rng.standard_normal((1, 4, 256)).astype(np.float32))
        with pytest.raises(ValueError, match="context rows"):
            stage.predict(x, c, temb, bad)


class TestStageConfig:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="kind"):
            StageConfig(kind="refiner")

    def test_wrong_class_for_kind(self):
        with pytest.raises(ConfigError):
            TSDAlignStage(SMALL_FCSD, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            DetailStage(SMALL_TSDM, np.random.default_rng(0))


class TestCheckpoint:
    def test_round_trip_bitwise_and_metadata(self, tmp_path):
        seq = _scene()
        res = train_tsdm(seq, FAST, SMALL_TSDM)
        path = tmp_path / "tsdm.npz"
        rng = np.random.default_rng(5)
        save_stage(path, res.stage, res.optimizer, rng, step=FAST.iterations,
                   losses=res.losses)
        loaded = load_stage(path)
        assert loaded["step"] == FAST.iterations
        assert np.array_equal(loaded["losses"], res.losses)
        for (ka, va), (kb, vb) in zip(sorted(res.stage.state_dict().items()),
                                      sorted(loaded["stage"].state_dict().items())):
            assert ka == kb and va.tobytes() == vb.tobytes()
        draw_a = loaded["rng"].standard_normal()
        draw_b = np.random.default_rng(5).standard_normal()
        assert draw_a == draw_b

    def test_reloaded_stage_samples_identically(self, tmp_path):
        seq = _scene()
        res = train_tsdm(seq, FAST, SMALL_TSDM)
        path = tmp_path / "tsdm.npz"
        save_stage(path, res.stage)
        loaded = load_stage(path)
        fr = seq.frames[0]
        ct = _tsd_of(fr.coarse, 32)
        a = align_tsd(res.stage, ct, fr.pose, fr.expression, steps=4, seed=9)
        b = align_tsd(loaded["stage"], ct, fr.pose, fr.expression, steps=4, seed=9)
        assert a.data.tobytes() == b.data.tobytes()

    def test_refuses_mismatched_config(self, tmp_path):
        res = train_tsdm(_scene(), FAST, SMALL_TSDM)
        path = tmp_path / "tsdm.npz"
        save_stage(path, res.stage)
        other = StageConfig(kind="tsd_align", image_size=32, schedule_steps=60)
        with pytest.raises(ConfigError, match="differs"):
            load_stage(path, expected_config=other)


class TestTraining:
    def test_tsdm_records_losses(self):
        res = train_tsdm(_scene(), FAST, SMALL_TSDM)
        assert res.losses.shape == (FAST.iterations,)
        assert np.isfinite(res.losses).all()

    def test_zero_lr_keeps_weights(self):
        cfg = TrainConfig(iterations=3, batch_size=2, lr=0.0, seed=0)
        res = train_tsdm(_scene(), cfg, SMALL_TSDM)
        fresh = TSDAlignStage(SMALL_TSDM, np.random.default_rng(0))
        # same init seed stream: weights must be untouched by lr=0 training
        from avatardiff.diffusion.training import _init_rng
        fresh = TSDAlignStage(SMALL_TSDM, _init_rng(0))
        for (ka, va), (kb, vb) in zip(sorted(res.stage.state_dict().items()),
                                      sorted(fresh.state_dict().items())):
            assert ka == kb and np.array_equal(va, vb)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        seq = _scene()
        full = train_tsdm(seq, TrainConfig(iterations=6, batch_size=2, lr=1e-3, seed=0),
                          SMALL_TSDM)
        half = train_tsdm(seq, TrainConfig(iterations=3, batch_size=2, lr=1e-3, seed=0),
                          SMALL_TSDM)
        path = tmp_path / "half.npz"
        save_stage(path, half.stage, half.optimizer, step=3, losses=half.losses)
        loaded = load_stage(path)
        resumed = train_tsdm(seq, TrainConfig(iterations=6, batch_size=2, lr=1e-3, seed=0),
                             SMALL_TSDM,
                             resume={"stage": loaded["stage"],
                                     "optimizer_state": loaded["optimizer_state"],
                                     "step": loaded["step"]})
        assert np.array_equal(resumed.losses, full.losses[3:])
        for (ka, va), (kb, vb) in zip(sorted(full.stage.state_dict().items()),
                                      sorted(resumed.stage.state_dict().items())):
            assert ka == kb and np.array_equal(va, vb), ka

    def test_fcsd_requires_alignment_stage(self):
        with pytest.raises(ConfigError, match="alignment stage"):
            train_fcsd(_scene(), None, None, FAST, SMALL_FCSD)

    def test_fcsd_checks_database_labels(self):
        seq = _scene()
        tsdm = train_tsdm(seq, FAST, SMALL_TSDM)
        db = EmotionDatabase(((np.ones(100), "neutral"),))
        with pytest.raises(ConfigError, match="missing from emotion database"):
            train_fcsd(seq, tsdm.stage, db, FAST, SMALL_FCSD)

    def test_fcsd_unaligned_ablation_skips_alignment_stage(self):
        seq = _scene()
        cfg = StageConfig(kind="detail", image_size=32, schedule_steps=50,
                          use_aligned_tsd=False)
        res = train_fcsd(seq, None, None, FAST, cfg)
        assert np.isfinite(res.losses).all()


class TestSynthesis:
    def test_deterministic_and_shaped(self):
        seq = _scene()
        db = build_emotion_database(seq)
        tsdm = train_tsdm(seq, FAST, SMALL_TSDM)
        fcsd = train_fcsd(seq, tsdm.stage, db, FAST, SMALL_FCSD)
        gen1 = synthesize_sequence(fcsd.stage, tsdm.stage, seq, db, steps=3, seed=7)
        gen2 = synthesize_sequence(fcsd.stage, tsdm.stage, seq, db, steps=3, seed=7)
        assert len(gen1.frames) == len(seq.frames)
        for a, b in zip(gen1.frames, gen2.frames):
            assert a.gt.data.tobytes() == b.gt.data.tobytes()
            assert a.gt.data.min() >= 0.0 and a.gt.data.max() <= 1.0

    def test_unknown_retrieved_label_reports_frame(self):
        seq = _scene()
        tsdm = train_tsdm(seq, FAST, SMALL_TSDM)
        fcsd = train_fcsd(seq, tsdm.stage, build_emotion_database(seq), FAST, SMALL_FCSD)
        bogus = EmotionDatabase(((np.ones(100), "ecstatic"),))
        with pytest.raises(KeyError, match="frame 0"):
            synthesize_sequence(fcsd.stage, tsdm.stage, seq, bogus, steps=2, seed=0)

    def test_align_tsd_validates_size(self):
        stage = TSDAlignStage(SMALL_TSDM, np.random.default_rng(0))
        seq = render_scene(SceneParams(image_size=16, num_frames=2, seed=0))
        small = _tsd_of(seq.frames[0].gt, 16)
        with pytest.raises(ValueError, match="stage expects"):
            align_tsd(stage, small, seq.frames[0].pose, seq.frames[0].expression,
                      steps=2, seed=0)

    def test_aligned_map_is_zero_mean(self):
        seq = _scene()
        stage = TSDAlignStage(SMALL_TSDM, np.random.default_rng(0))
        fr = seq.frames[0]
        out = align_tsd(stage, _tsd_of(fr.coarse, 32), fr.pose, fr.expression,
                        steps=3, seed=1)
        assert np.abs(out.data.mean(axis=(0, 1))).max() <= 1e-3
