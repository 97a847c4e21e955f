"""Separator: chunking, fusion, masking, decoding, checkpoints."""

import numpy as np
import pytest

from tselab import tensor as tt
from tselab.audio import Waveform
from tselab.errors import DataError, NumericalError, ShapeError
from tselab.separator import (SeparatorModel, chunk, desk_config,
                              overlap_add, paper_config)
from tselab.tensor import Tape, Tensor


def tiny_config(**overrides):
    base = dict(feature_dim=8, chunk_len=4, n_blocks=1, n_heads=2, ff_dim=16,
                cue_dim=6, n_sa_layers=1)
    base.update(overrides)
    return desk_config(**base)


class TestEncodeDecode:
    def test_encode_length_formula(self):
        model = SeparatorModel(tiny_config(), seed=0)
        h = model.encode(np.random.default_rng(0).uniform(-0.5, 0.5, 8000))
        assert h.shape == (999, 8)

    def test_encode_single_window(self):
        model = SeparatorModel(tiny_config(), seed=0)
        assert model.encode(np.ones(16)).shape == (1, 8)

    def test_encode_too_short(self):
        model = SeparatorModel(tiny_config(), seed=0)
        with pytest.raises(ShapeError, match="shorter"):
            model.encode(np.ones(15))

    def test_zero_waveform_gives_zero_features(self):
        model = SeparatorModel(tiny_config(), seed=0)
        assert np.all(model.encode(np.zeros(160)).data == 0.0)

    def test_decode_length_formula(self):
        model = SeparatorModel(tiny_config(), seed=0)
        out = model.decode(Tensor(np.random.default_rng(1).standard_normal((999, 8))))
        assert out.shape == (8000,)

    def test_zero_mask_zero_waveform(self):
        model = SeparatorModel(tiny_config(), seed=0)
        h = model.encode(np.random.default_rng(2).uniform(-0.5, 0.5, 400))
        out = model.decode(tt.mul(h, Tensor(np.zeros(h.shape))))
        assert np.all(out.data == 0.0)


class TestChunking:
    def test_chunk_count_no_padding(self):
        h = Tensor(np.random.default_rng(0).standard_normal((500, 3)))
        ct = chunk(h, chunk_len=250, overlap=0.5)
        assert ct.data.shape == (1, 3, 250, 3)  # S = 3, hop 125

    def test_single_chunk_when_t_equals_k(self):
        h = Tensor(np.random.default_rng(1).standard_normal((8, 2)))
        ct = chunk(h, chunk_len=8, overlap=0.5)
        assert ct.data.shape[1] == 1

    def test_round_trip_exact_for_many_lengths(self):
        rng = np.random.default_rng(2)
        for t_len in (2, 5, 8, 9, 12, 100, 499, 1000):
            h = Tensor(rng.standard_normal((t_len, 4)))
            back = overlap_add(chunk(h, chunk_len=8, overlap=0.5))
            assert np.max(np.abs(back.data - h.data)) < 1e-12

    def test_constant_chunks_give_constant_output(self):
        ct = chunk(Tensor(np.full((20, 2), 3.25)), chunk_len=4, overlap=0.5)
        out = overlap_add(ct)
        np.testing.assert_allclose(out.data, 3.25, atol=1e-13)

    def test_single_chunk_overlap_add_is_identity(self):
        h = Tensor(np.random.default_rng(3).standard_normal((4, 5)))
        ct = chunk(h, chunk_len=4, overlap=0.5)
        assert ct.data.shape[1] == 1
        np.testing.assert_array_equal(overlap_add(ct).data, h.data)

    def test_gradients_flow_through_roundtrip(self):
        rng = np.random.default_rng(4)
        h = Tensor(rng.standard_normal((13, 3)), requires_grad=True)
        w = rng.standard_normal((13, 3))
        with Tape() as tape:
            out = overlap_add(chunk(h, chunk_len=4, overlap=0.5))
            loss = tt.tsum(tt.mul(out, Tensor(w)))
        tape.backward(loss)
        np.testing.assert_allclose(h.grad, w, atol=1e-12)  # round trip == identity


class TestFusion:
    def test_mask_shape_and_nonnegativity(self):
        model = SeparatorModel(tiny_config(), seed=1)
        rng = np.random.default_rng(0)
        h = model.encode(rng.uniform(-0.5, 0.5, 600))
        mask = model.masking_forward(h, rng.standard_normal(6))
        assert mask.shape == h.shape
        assert np.all(mask.data >= 0.0)

    def test_fusion_site_count_is_two_per_block(self):
        for n_blocks in (1, 2, 3):
            model = SeparatorModel(tiny_config(n_blocks=n_blocks), seed=1)
            rng = np.random.default_rng(0)
            h = model.encode(rng.uniform(-0.5, 0.5, 300))
            model.masking_forward(h, rng.standard_normal(6))
            assert model.fusion_calls == 2 * n_blocks

    def test_paper_preset_has_eight_fusion_sites(self):
        model = SeparatorModel(paper_config(cue_dim=8), seed=0)
        rng = np.random.default_rng(1)
        h = model.encode(rng.uniform(-0.5, 0.5, 2000))
        model.masking_forward(h, rng.standard_normal(8))
        assert model.fusion_calls == 8  # 2 paths x N=4 blocks

    def test_cue_ablation_reduces_to_cue_free_forward(self):
        model = SeparatorModel(tiny_config(), seed=2)
        for name, p in model.params.items():
            if name.endswith(("q_cue", "k_cue", "v_cue")):
                p.data = np.zeros_like(p.data)
        rng = np.random.default_rng(3)
        samples = rng.uniform(-0.5, 0.5, 500)
        h = model.encode(samples)
        with_cue = model.masking_forward(h, rng.standard_normal(6)).data
        without = model.masking_forward(model.encode(samples), None).data
        assert np.array_equal(with_cue, without)  # bitwise

    def test_output_depends_on_cue(self):
        model = SeparatorModel(tiny_config(), seed=4)
        rng = np.random.default_rng(5)
        h_in = rng.uniform(-0.5, 0.5, 500)
        m1 = model.masking_forward(model.encode(h_in), rng.standard_normal(6)).data
        m2 = model.masking_forward(model.encode(h_in), rng.standard_normal(6)).data
        assert np.linalg.norm(m1 - m2) > 0.0

    def test_cue_gradient_nonzero(self):
        # finite-difference sensitivity: the mask output must move with the cue
        model = SeparatorModel(tiny_config(), seed=6)
        rng = np.random.default_rng(7)
        samples = rng.uniform(-0.5, 0.5, 300)
        cue = Tensor(rng.standard_normal(6), requires_grad=True)
        weights = rng.standard_normal(model.encode(samples).shape)
        with Tape() as tape:
            mask = model.masking_forward(model.encode(samples), cue)
            loss = tt.tsum(tt.mul(mask, Tensor(weights)))
        tape.backward(loss)
        assert cue.grad is not None and np.any(cue.grad != 0.0)

        # central finite differences agree
        def scalar(vec):
            m = model.masking_forward(model.encode(samples), vec)
            return float(np.sum(m.data * weights))

        step = 1e-5
        for j in range(3):
            up, down = cue.data.copy(), cue.data.copy()
            up[j] += step
            down[j] -= step
            fd = (scalar(up) - scalar(down)) / (2 * step)
            denom = max(abs(fd), abs(cue.grad[j]), 1e-2)
            assert abs(fd - cue.grad[j]) / denom < 1e-4

    def test_cue_dim_mismatch_rejected(self):
        model = SeparatorModel(tiny_config(), seed=0)
        h = model.encode(np.random.default_rng(0).uniform(-0.5, 0.5, 200))
        with pytest.raises(ShapeError, match="cue dim"):
            model.masking_forward(h, np.zeros(7))

    def test_sigmoid_mask_option(self):
        model = SeparatorModel(tiny_config(mask_nonlinearity="sigmoid"), seed=0)
        rng = np.random.default_rng(1)
        mask = model.masking_forward(model.encode(rng.uniform(-0.5, 0.5, 200)),
                                     rng.standard_normal(6))
        assert np.all((mask.data > 0.0) & (mask.data < 1.0))


class TestExtract:
    def test_deterministic_and_length_preserving(self):
        model = SeparatorModel(tiny_config(), seed=8)
        rng = np.random.default_rng(9)
        mixture = Waveform(rng.uniform(-0.5, 0.5, 803))  # length not multiple of stride
        cue = rng.standard_normal(6)
        out1 = model.extract(mixture, cue)
        out2 = model.extract(mixture, cue)
        assert len(out1) == len(mixture)
        assert np.array_equal(out1.samples, out2.samples)

    def test_no_dead_parameters_at_init(self):
        SeparatorModel(tiny_config(), seed=10).verify_gradient_flow(seed=0)

    def test_dead_parameter_detected(self):
        model = SeparatorModel(tiny_config(), seed=11)
        model.params["ghost.w"] = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NumericalError, match="ghost.w"):
            model.verify_gradient_flow(seed=0)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        model = SeparatorModel(tiny_config(), seed=12)
        model.save(tmp_path / "m.ckpt", meta={"system": "xi-TSE"})
        again = SeparatorModel.load(tmp_path / "m.ckpt")
        for name, p in model.params.items():
            assert np.array_equal(p.data, again.params[name].data)
        # identical bytes when re-saved
        again.save(tmp_path / "m2.ckpt", meta={"system": "xi-TSE"})
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            SeparatorModel.load(tmp_path / "bad.ckpt")

    def test_wrong_kind_rejected(self, tmp_path):
        from tselab.ckpt import save_checkpoint
        save_checkpoint(tmp_path / "e.ckpt", kind="embedder", config={},
                        blobs={"x": np.zeros(2)})
        with pytest.raises(DataError, match="kind"):
            SeparatorModel.load(tmp_path / "e.ckpt")

    def test_identical_outputs_after_reload(self, tmp_path):
        model = SeparatorModel(tiny_config(), seed=13)
        rng = np.random.default_rng(14)
        mixture = Waveform(rng.uniform(-0.5, 0.5, 400))
        cue = rng.standard_normal(6)
        before = model.extract(mixture, cue).samples
        model.save(tmp_path / "m.ckpt")
        after = SeparatorModel.load(tmp_path / "m.ckpt").extract(mixture, cue).samples
        assert np.array_equal(before, after)
