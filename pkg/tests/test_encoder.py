import numpy as np
import pytest

from alignlab.core import Graph, Tensor, backward, finite_diff_check, no_grad, ops
from alignlab.encoder import AttentionRecord, Encoder, EncoderConfig
from alignlab.errors import ConfigError


def micro_cfg(**kw):
    base = dict(num_layers=2, model_dim=16, num_heads=2, ffn_mult=2,
                conv1d_kernel=3, subsample_layers=1, subsample_channels=4,
                feature_dim=4)
    base.update(kw)
    return EncoderConfig(**base)


class TestSubsampleArithmetic:
    @pytest.mark.parametrize("t,layers,want", [(16, 2, 4), (1, 2, 1), (100, 2, 25), (9, 1, 5), (7, 0, 7)])
    def test_output_length_closed_form(self, t, layers, want):
        cfg = micro_cfg(subsample_layers=layers)
        assert cfg.subsampled_len(t) == want
        enc = Encoder(cfg, rng=np.random.default_rng(0))
        with no_grad():
            h, _ = enc.encode(np.random.default_rng(1).normal(size=(t, cfg.feature_dim)))
        assert h.shape == (want, cfg.model_dim)


class TestConformerBlock:
    def test_zero_residual_branches_reduce_to_final_norm(self):
        cfg = micro_cfg(num_layers=1, subsample_layers=0)
        enc = Encoder(cfg, rng=np.random.default_rng(2))
        for name, t in enc.params.items():
            if name.startswith("layer0.") and not name.startswith("layer0.out.ln"):
                t.values[...] = 0.0
        x = Tensor(np.random.default_rng(3).normal(size=(1, 6, cfg.model_dim)))
        with no_grad():
            out = enc.conformer_block(x, 0, None, np.arange(6))
            want = ops.layer_norm(x, enc.params["layer0.out.ln.g"], enc.params["layer0.out.ln.b"])
        assert np.allclose(out.values, want.values, atol=1e-12)

    def test_single_frame_attention_is_one(self):
        cfg = micro_cfg(num_layers=1, subsample_layers=0)
        enc = Encoder(cfg, rng=np.random.default_rng(4))
        rec = []
        x = Tensor(np.random.default_rng(5).normal(size=(1, 1, cfg.model_dim)))
        with no_grad():
            enc.conformer_block(x, 0, None, np.arange(1), rec)
        assert np.allclose(rec[0], np.ones((1, cfg.num_heads, 1, 1)))

    def test_recorded_rows_sum_to_one(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(6))
        feats = np.random.default_rng(7).normal(size=(13, cfg.feature_dim))
        with no_grad():
            _, rec = enc.encode(feats, record_attention=True)
        assert rec.num_layers == cfg.num_layers
        for l in range(rec.num_layers):
            probs = rec.layer(l)
            assert probs.shape[0] == cfg.num_heads
            assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
            assert (probs >= 0).all()


class TestEncode:
    def test_deterministic(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(8))
        feats = np.random.default_rng(9).normal(size=(11, cfg.feature_dim))
        with no_grad():
            a, _ = enc.encode(feats)
            b, _ = enc.encode(feats)
        assert np.array_equal(a.values, b.values)

    def test_recording_is_observation_only(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(10))
        feats = np.random.default_rng(11).normal(size=(10, cfg.feature_dim))
        with no_grad():
            a, rec_off = enc.encode(feats, record_attention=False)
            b, rec_on = enc.encode(feats, record_attention=True)
        assert rec_off is None
        assert isinstance(rec_on, AttentionRecord)
        assert np.array_equal(a.values, b.values)

    def test_full_context_last_frame_reaches_first_output(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(12))
        feats = np.random.default_rng(13).normal(size=(12, cfg.feature_dim))
        bumped = feats.copy()
        bumped[-1] += 1.0
        with no_grad():
            a, _ = enc.encode(feats)
            b, _ = enc.encode(bumped)
        assert not np.allclose(a.values[0], b.values[0])

    def test_batch_matches_single(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(14))
        rng = np.random.default_rng(15)
        lens = [7, 12, 9]
        feats = [rng.normal(size=(t, cfg.feature_dim)) for t in lens]
        t_max = max(lens)
        padded = np.zeros((3, t_max, cfg.feature_dim))
        for i, f in enumerate(feats):
            padded[i, : len(f)] = f
        with no_grad():
            hb, out_lens, _ = enc.forward_batch(Tensor(padded), np.array(lens))
            for i, f in enumerate(feats):
                hs, _ = enc.encode(f)
                assert np.allclose(hb.values[i, : out_lens[i]], hs.values, atol=1e-10)
                assert not hb.values[i, out_lens[i]:].any()

    def test_gradient_matches_finite_differences(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(16))
        feats = np.random.default_rng(17).normal(size=(6, cfg.feature_dim))
        w = np.random.default_rng(18).normal(size=(cfg.subsampled_len(6), cfg.model_dim))

        def f(x):
            h, _ = enc.encode(x)
            return ops.sum_all(ops.mul(h, w))

        assert finite_diff_check(f, Tensor(feats), h=1e-5) <= 1e-3

    def test_parameter_gradient_flows(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(19))
        feats = np.random.default_rng(20).normal(size=(8, cfg.feature_dim))
        g = Graph()
        with g:
            h, _ = enc.encode(feats)
            loss = ops.sum_all(ops.mul(h, h))
        backward(g, loss)
        for name in ("proj.w", "layer0.att.wq", "layer1.ffn2.w2", "layer0.conv.dw.w"):
            assert np.abs(enc.params[name].grad).max() > 0, name


class TestChunked:
    def test_single_chunk_identical_to_whole(self):
        cfg = micro_cfg()
        enc = Encoder(cfg, rng=np.random.default_rng(21))
        feats = np.random.default_rng(22).normal(size=(14, cfg.feature_dim))
        with no_grad():
            whole, _ = enc.encode(feats)
            chunked, starts = enc.encode_chunked(feats, chunk_frames=100)
        assert starts == [0]
        assert np.array_equal(whole.values, chunked.values)

    def test_chunks_are_independent(self):
        # perturbing audio in chunk 2 leaves chunk-1 embeddings untouched
        cfg = micro_cfg(subsample_layers=0)
        enc = Encoder(cfg, rng=np.random.default_rng(23))
        feats = np.random.default_rng(24).normal(size=(12, cfg.feature_dim))
        bumped = feats.copy()
        bumped[9] += 2.0
        with no_grad():
            a, starts = enc.encode_chunked(feats, chunk_frames=6)
            b, _ = enc.encode_chunked(bumped, chunk_frames=6)
        assert starts == [0, 6]
        assert np.array_equal(a.values[:6], b.values[:6])
        assert not np.allclose(a.values[6:], b.values[6:])

    def test_invalid_chunk_size(self):
        enc = Encoder(micro_cfg(), rng=np.random.default_rng(25))
        with pytest.raises(ConfigError):
            enc.encode_chunked(np.zeros((4, 4)), 0)


def test_rotary_head_dim_must_be_even():
    with pytest.raises(ConfigError):
        EncoderConfig(model_dim=6, num_heads=2, position_mode="rotary")


def test_dim_head_divisibility():
    with pytest.raises(ConfigError):
        EncoderConfig(model_dim=10, num_heads=4)
