"""Trainer: SI-SDR loss, Adam, plateau schedule, loop determinism."""

import math

import numpy as np
import pytest

from tselab.audio import (MixtureExample, Waveform, make_speaker_profiles,
                          mix_at_snr, synth_speaker_utterance)
from tselab.errors import DegenerateSignalError, NumericalError
from tselab.gradcheck import check_op
from tselab.separator import SeparatorModel, desk_config
from tselab.tensor import Tensor
from tselab.trainer import (AdamState, TrainConfig, TrainState, adam_step,
                            plateau_schedule, si_sdr_loss, train_tse)


class TestSiSdrLoss:
    def test_perfect_estimate_is_large_finite_negative(self):
        rng = np.random.default_rng(0)
        target = rng.standard_normal(500)
        loss = si_sdr_loss(target, Tensor(target.copy()))
        assert math.isfinite(loss.item())
        assert loss.item() < -80.0  # eps-guarded optimum

    def test_scale_invariance_survives(self):
        rng = np.random.default_rng(1)
        target = rng.standard_normal(800)
        est = target + 0.3 * rng.standard_normal(800)
        base = si_sdr_loss(target, Tensor(est)).item()
        doubled = si_sdr_loss(target, Tensor(2.0 * est)).item()
        assert abs(base - doubled) < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        target = rng.standard_normal(40)
        err = check_op(lambda e: si_sdr_loss(target, e),
                       [target + 0.5 * rng.standard_normal(40)],
                       op_name="si_sdr_loss")
        assert err < 1e-4

    def test_loss_decreases_si_sdr_increases(self):
        rng = np.random.default_rng(3)
        target = rng.standard_normal(200)
        noisy = si_sdr_loss(target, Tensor(target + rng.standard_normal(200))).item()
        close = si_sdr_loss(target, Tensor(target + 0.01 * rng.standard_normal(200))).item()
        assert close < noisy

    def test_silent_target_rejected(self):
        with pytest.raises(DegenerateSignalError):
            si_sdr_loss(np.zeros(10), Tensor(np.ones(10)))


class TestAdam:
    def test_zero_gradient_no_update(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        params = {"w": p}
        adam_step(params, AdamState.for_params(params), lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_asymptotic_step(self):
        # with constant gradient the bias-corrected update tends to lr*sign(g)
        p = Tensor(np.array([0.0]), requires_grad=True)
        params = {"w": p}
        state = AdamState.for_params(params)
        lr = 1e-3
        prev = p.data.copy()
        for step in range(600):
            p.grad = np.array([2.5])
            adam_step(params, state, lr=lr)
            if step >= 590:
                delta = prev - p.data
                assert abs(delta[0] - lr) < 1e-5
            prev = p.data.copy()

    def test_quadratic_bowl_convergence(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        params = {"x": p}
        state = AdamState.for_params(params)
        for _ in range(2000):
            p.grad = 2.0 * p.data  # d/dx x^2
            adam_step(params, state, lr=1e-2)
        assert abs(p.data[0]) < 1e-3

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        params = {"broken.weight": p}
        with pytest.raises(NumericalError, match="broken.weight"):
            adam_step(params, AdamState.for_params(params), lr=1e-3)

    def test_global_norm_clipping(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        params = {"w": p}
        state = AdamState.for_params(params)
        p.grad = np.array([1000.0])
        adam_step(params, state, lr=1.0, clip_norm=1.0)
        # first step with clipping: m_hat/(sqrt(v_hat)+eps) == 1 regardless,
        # so just check the moments saw the clipped gradient
        np.testing.assert_allclose(state.m["w"], [0.1])  # 0.9*0 + 0.1*clipped(1.0)


class TestPlateauSchedule:
    @staticmethod
    def _cfg(**overrides):
        base = dict(lr_init=1.0, warm_epochs=20, plateau_patience_epochs=2,
                    lr_factor=0.5, max_epochs=100)
        base.update(overrides)
        return TrainConfig(**base)

    def test_improving_losses_never_decay(self):
        cfg = self._cfg()
        state = TrainState(current_lr=cfg.lr_init)
        for epoch in range(1, 60):
            state.epoch = epoch
            plateau_schedule(state, 100.0 - epoch, cfg)
        assert state.current_lr == 1.0
        assert state.n_decays == 0

    def test_flat_after_improvement_decays_at_epoch_23(self):
        # losses improve through epoch 21, then stay flat: patience-2 decay
        # fires at epoch 23
        cfg = self._cfg()
        state = TrainState(current_lr=cfg.lr_init)
        decay_epochs = []
        for epoch in range(1, 30):
            state.epoch = epoch
            loss = 100.0 - min(epoch, 21)
            before = state.current_lr
            plateau_schedule(state, loss, cfg)
            if state.current_lr != before:
                decay_epochs.append(epoch)
        assert decay_epochs[0] == 23

    def test_warm_period_exempt(self):
        cfg = self._cfg()
        state = TrainState(current_lr=cfg.lr_init)
        for epoch in range(1, 21):
            state.epoch = epoch
            plateau_schedule(state, 5.0, cfg)  # flat from the start
        assert state.current_lr == 1.0

    def test_lr_trajectory_is_powers_of_factor(self):
        cfg = self._cfg()
        state = TrainState(current_lr=cfg.lr_init)
        for epoch in range(1, 80):
            state.epoch = epoch
            plateau_schedule(state, 5.0, cfg)
            assert state.current_lr == cfg.lr_init * cfg.lr_factor ** state.n_decays

    def test_tiny_jitter_counts_as_plateau(self):
        cfg = self._cfg()
        state = TrainState(current_lr=cfg.lr_init)
        state.epoch = 25
        plateau_schedule(state, 1.0, cfg)
        for epoch in (26, 27):
            state.epoch = epoch
            plateau_schedule(state, 1.0 - 1e-9, cfg)  # below improve_eps
        assert state.n_decays == 1


def overfit_fixture(dur=0.25, corpus_seed=42, snrs=(1.0, 4.0)):
    profiles = make_speaker_profiles(2, seed=corpus_seed)
    utts = {s: [synth_speaker_utterance(p, dur, seed=u) for u in range(3)]
            for s, p in enumerate(profiles)}
    examples = []
    for (ua, ub), snr in zip([(0, 0), (1, 1)], snrs):
        mixed = mix_at_snr(utts[0][ua], utts[1][ub], snr_db=snr)
        examples.append(MixtureExample(mixed.mixture, mixed.target,
                                       mixed.interferer, utts[0][2], "s0", snr))
        examples.append(MixtureExample(mixed.mixture, mixed.interferer,
                                       mixed.target, utts[1][2], "s1", snr))
    return examples


def spectral_cue(wf: Waveform) -> np.ndarray:
    spec = np.abs(np.fft.rfft(wf.samples, n=512))[:32]
    return spec / (np.linalg.norm(spec) + 1e-9)


class TestTrainLoop:
    def test_loss_decreases_on_fixture(self):
        examples = overfit_fixture()
        model = SeparatorModel(desk_config(cue_dim=32), seed=7)
        cfg = TrainConfig(lr_init=1e-3, max_epochs=12, seed=3)
        result = train_tse(model, examples, examples[:2], spectral_cue, cfg)
        first = np.mean([r.train_loss for r in result.log[:3]])
        last = np.mean([r.train_loss for r in result.log[-3:]])
        assert last < first

    def test_resume_reproduces_unbroken_run(self, tmp_path):
        examples = overfit_fixture(dur=0.2)
        cfg_full = TrainConfig(lr_init=1e-3, max_epochs=8, seed=5)

        unbroken = SeparatorModel(desk_config(cue_dim=32), seed=9)
        full = train_tse(unbroken, examples, examples[:2], spectral_cue, cfg_full)

        cfg_half = TrainConfig(lr_init=1e-3, max_epochs=4, seed=5)
        part = SeparatorModel(desk_config(cue_dim=32), seed=9)
        train_tse(part, examples, examples[:2], spectral_cue, cfg_half,
                  ckpt_path=tmp_path / "ck.ckpt")

        resumed = SeparatorModel(desk_config(cue_dim=32), seed=9)
        tail = train_tse(resumed, examples, examples[:2], spectral_cue, cfg_full,
                         resume_from=str(tmp_path / "ck.ckpt") + ".last")
        assert [r.epoch for r in tail.log] == [5, 6, 7, 8]
        for row_full, row_tail in zip(full.log[4:], tail.log):
            assert row_full.train_loss == row_tail.train_loss
            assert row_full.valid_loss == row_tail.valid_loss
        for name, p in unbroken.params.items():
            assert np.array_equal(p.data, resumed.params[name].data)

    def test_dynamic_mixing_changes_examples_across_epochs(self, tmp_path):
        from tselab.audio import UtterancePool, write_corpus_manifest, write_wav

        rows = []
        for i, prof in enumerate(make_speaker_profiles(3, seed=17)):
            for u in range(3):
                name = f"s{i}_u{u}.wav"
                write_wav(tmp_path / name,
                          synth_speaker_utterance(prof, 0.2, seed=u))
                rows.append({"speaker": f"s{i}", "path": name})
        write_corpus_manifest(tmp_path / "corpus.jsonl", rows)
        pool = UtterancePool.from_manifest(tmp_path / "corpus.jsonl")

        seen_hashes = []

        class Recorder(SeparatorModel):
            def estimate_tensor(self, samples, cue):
                seen_hashes.append(hash(np.asarray(samples).tobytes()))
                return super().estimate_tensor(samples, cue)

        model = Recorder(desk_config(cue_dim=32), seed=1)
        cfg = TrainConfig(lr_init=1e-3, max_epochs=3, seed=2,
                          dynamic_mixing=True, examples_per_epoch=3)
        valid = overfit_fixture(dur=0.2)[:1]
        train_tse(model, pool, valid, spectral_cue, cfg)
        epochs = [set(seen_hashes[i * 3:(i + 1) * 3]) for i in range(3)]
        assert epochs[0] != epochs[1] and epochs[1] != epochs[2]

    def test_log_schema(self):
        examples = overfit_fixture(dur=0.2)
        model = SeparatorModel(desk_config(cue_dim=32), seed=3)
        result = train_tse(model, examples, examples[:2], spectral_cue,
                           TrainConfig(lr_init=1e-3, max_epochs=2, seed=1))
        row = result.log[0].as_dict()
        assert set(row) == {"epoch", "train_loss", "valid_loss", "lr", "wall_s"}
