import math

import numpy as np
import pytest

from alignlab import lattice
from alignlab.core import Graph, Tensor, backward, finite_diff_check, no_grad, ops
from alignlab.data import EOS, SOS, Batch, DataConfig, SynthConfig, make_dataset
from alignlab.errors import ContractError, LengthError, NoAlignmentPathError
from alignlab.models import (
    AlignerModel,
    LabelSmoothingSpec,
    NonARAligner,
    batch_prior_estimate,
    build_model,
    ctc_loss,
)
from conftest import micro_model_cfg
from oracles import (
    ctc_log_prob_enumerated,
    random_log_probs,
    rnnt_log_prob_enumerated,
    smoothed_ce,
)


class TestPredictionNet:
    def test_deterministic(self, micro_aligner):
        s0 = micro_aligner.pred.init_state()
        g1, s1 = micro_aligner.pred.step(s0, 3)
        g2, s2 = micro_aligner.pred.step(s0, 3)
        assert np.array_equal(g1, g2)
        assert np.array_equal(s1.h, s2.h) and np.array_equal(s1.c, s2.c)

    def test_seeding_contract(self, micro_aligner):
        # the post-<SOS> state depends only on parameters, not on any data
        s0 = micro_aligner.pred.init_state()
        assert not s0.h.any() and not s0.c.any() and s0.last_token == SOS
        g, s1 = micro_aligner.pred.step(s0, SOS)
        assert s1.last_token == SOS
        assert np.array_equal(g, micro_aligner.pred.step(micro_aligner.pred.init_state(), SOS)[0])

    def test_out_of_vocab_rejected(self, micro_aligner):
        with pytest.raises(ContractError):
            micro_aligner.pred.step(micro_aligner.pred.init_state(), 99)

    def test_recurrence_carries_history(self, micro_aligner):
        # gradient of g_3 w.r.t. the embedding row of y_1 is nonzero
        pred = micro_aligner.pred
        tokens = np.array([[SOS, 2, 3]])
        g = Graph()
        with g:
            outs = pred.forward_prefixes(tokens)
            g3 = ops.narrow(outs, 1, 2, 1)
            loss = ops.sum_all(g3)
        backward(g, loss)
        emb_grad = pred.params["emb"].grad
        assert np.abs(emb_grad[2]).max() > 0

    def test_prefix_outputs_match_stepwise(self, micro_aligner):
        pred = micro_aligner.pred
        tokens = np.array([[SOS, 2, 4, 3]])
        with no_grad():
            outs = pred.forward_prefixes(tokens).values[0]
        state = pred.init_state()
        for j, tok in enumerate(tokens[0]):
            gv, state = pred.step(state, int(tok))
            assert np.allclose(outs[j], gv, atol=1e-12)


class TestJoint:
    def test_zero_inputs_give_output_bias(self, micro_aligner):
        joint = micro_aligner.joint
        joint.params["bo"].values[...] = np.arange(joint.num_outputs, dtype=float)
        got = joint.logits(np.zeros(16), np.zeros(12))
        assert np.allclose(got, np.arange(joint.num_outputs), atol=1e-12)

    def test_aligner_realizes_exactly_u_by_v_logits(self, micro_aligner):
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(1, 7, 16)))
        tokens = np.array([[2, 3, EOS]])
        with no_grad():
            logits = micro_aligner.diagonal_logits(h, tokens, np.array([3]))
        assert logits.shape == (1, 3, micro_aligner.vocab_size)

    def test_gradient_check(self, micro_aligner):
        joint = micro_aligner.joint
        g_vec = np.random.default_rng(1).normal(size=(1, 12))
        w = np.random.default_rng(2).normal(size=(1, joint.num_outputs))

        def f(h):
            return ops.sum_all(ops.mul(joint.paired(h, Tensor(g_vec)), w))

        x = Tensor(np.random.default_rng(3).normal(size=(1, 16)))
        assert finite_diff_check(f, x) <= 1e-3


class TestAlignerLoss:
    def _uniform_joint(self, model):
        model.joint.params["wo"].values[...] = 0.0
        model.joint.params["bo"].values[...] = 0.0

    def test_uniform_logits_give_log_v(self, micro_aligner):
        self._uniform_joint(micro_aligner)
        h = Tensor(np.random.default_rng(4).normal(size=(5, 16)))
        loss = micro_aligner.loss(h, np.array([EOS]), LabelSmoothingSpec(epsilon=0.0))
        assert loss.item() == pytest.approx(math.log(micro_aligner.vocab_size), abs=1e-12)

    def test_perfect_prediction_drives_loss_to_zero(self, micro_aligner):
        self._uniform_joint(micro_aligner)
        micro_aligner.joint.params["bo"].values[EOS] = 60.0
        h = Tensor(np.random.default_rng(5).normal(size=(4, 16)))
        loss = micro_aligner.loss(h, np.array([EOS]), LabelSmoothingSpec(epsilon=0.0))
        assert abs(loss.item()) <= 1e-9

    def test_matches_per_frame_smoothed_ce_oracle(self, micro_aligner):
        rng = np.random.default_rng(6)
        h = Tensor(rng.normal(size=(6, 16)))
        y = np.array([3, EOS])
        spec = LabelSmoothingSpec(epsilon=0.1, prior_mode="uniform")
        with no_grad():
            logits = micro_aligner.diagonal_logits(
                ops.reshape(h, (1, 6, 16)), y[None, :], np.array([2])).values[0]
        v = micro_aligner.vocab_size
        want = smoothed_ce(logits, y, 0.1, np.full(v, 1.0 / v))
        got = micro_aligner.loss(h, y, spec).item()
        assert got == pytest.approx(want, abs=1e-9)

    def test_epsilon_zero_is_plain_cross_entropy(self, micro_aligner):
        rng = np.random.default_rng(7)
        h = Tensor(rng.normal(size=(5, 16)))
        y = np.array([2, 4, EOS])
        with no_grad():
            logits = micro_aligner.diagonal_logits(
                ops.reshape(h, (1, 5, 16)), y[None, :], np.array([3])).values[0]
        want = smoothed_ce(logits, y, 0.0, np.full(micro_aligner.vocab_size, 0.0))
        got = micro_aligner.loss(h, y, LabelSmoothingSpec(epsilon=0.0)).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_frames_beyond_u_have_exactly_zero_gradient(self, micro_aligner):
        rng = np.random.default_rng(8)
        h = Tensor(rng.normal(size=(9, 16)), requires_grad=True)
        y = np.array([2, 3, EOS])
        g = Graph()
        with g:
            loss = micro_aligner.loss(h, y, LabelSmoothingSpec(epsilon=0.1))
        backward(g, loss)
        tail = h.grad[len(y):]
        assert np.abs(tail).max() <= 1e-12
        assert np.abs(h.grad[: len(y)]).max() > 0

    def test_u_exceeding_frames_is_an_error(self, micro_aligner):
        h = Tensor(np.zeros((2, 16)))
        with pytest.raises(LengthError, match="3.*2|2.*3"):
            micro_aligner.loss(h, np.array([2, 3, EOS]), LabelSmoothingSpec())

    def test_batch_loss_equals_sum_of_singles(self, micro_aligner):
        dc = DataConfig(synth=SynthConfig(vocab_size=5, feature_dim=4, duration_min=3,
                                          duration_max=5, noise_std=0.1, seed=0),
                        tokens_min=1, tokens_max=3)
        utts = make_dataset(dc, 3, seed=21)
        batch = Batch(utts)
        spec = LabelSmoothingSpec(epsilon=0.1, prior_mode="uniform")
        with no_grad():
            total, _ = micro_aligner.loss_batch(batch, spec)
            singles = 0.0
            for u in utts:
                h, _ = micro_aligner.encoder.encode(u.features)
                singles += micro_aligner.loss(h, u.tokens, spec).item()
        assert total.item() == pytest.approx(singles, rel=1e-9)


class TestNonAR:
    def test_matches_aligner_with_text_path_ablated(self):
        cfg = micro_model_cfg()
        rng = np.random.default_rng(99)
        nonar = build_model("nonar_aligner", cfg, np.random.default_rng(31))
        aligner = build_model("aligner", cfg, np.random.default_rng(32))
        # share encoder and head weights; remove the aligner's text path
        for k, v in nonar.encoder.params.items():
            aligner.encoder.params[k].values[...] = v.values
        aligner.joint.params["wh"].values[...] = nonar.head["wh"].values
        aligner.joint.params["wo"].values[...] = nonar.head["wo"].values
        aligner.joint.params["bo"].values[...] = nonar.head["bo"].values
        aligner.joint.params["wg"].values[...] = 0.0
        dc = DataConfig(synth=SynthConfig(vocab_size=5, feature_dim=4, duration_min=3,
                                          duration_max=5, noise_std=0.1, seed=1),
                        tokens_min=1, tokens_max=3)
        batch = Batch(make_dataset(dc, 3, seed=7))
        spec = LabelSmoothingSpec(epsilon=0.1, prior_mode="uniform")
        with no_grad():
            la, _ = aligner.loss_batch(batch, spec)
            ln, _ = nonar.loss_batch(batch, spec)
        assert la.item() == pytest.approx(ln.item(), rel=1e-12)

    def test_identical_frames_identical_logits(self):
        nonar = build_model("nonar_aligner", micro_model_cfg(), np.random.default_rng(33))
        h = np.tile(np.random.default_rng(0).normal(size=(1, 16)), (4, 1))
        logits = nonar.frame_logits(h)
        assert np.allclose(logits, logits[0])

    def test_gradient_check(self):
        nonar = build_model("nonar_aligner", micro_model_cfg(), np.random.default_rng(34))
        w = np.random.default_rng(1).normal(size=(3, nonar.vocab_size))

        def f(h):
            return ops.sum_all(ops.mul(nonar.head_logits(h), w))

        assert finite_diff_check(f, Tensor(np.random.default_rng(2).normal(size=(3, 16)))) <= 1e-3


class TestRnntLoss:
    def test_single_path_t1_u0(self):
        rng = np.random.default_rng(10)
        logp = random_log_probs(rng, (1, 1, 4))
        nll = lattice.rnnt_neg_log_likes(logp[None], np.zeros((1, 0), dtype=np.int64),
                                         [1], [0])
        assert nll[0] == pytest.approx(-logp[0, 0, 3], abs=1e-12)

    def test_single_path_t1_u1(self):
        rng = np.random.default_rng(11)
        logp = random_log_probs(rng, (1, 2, 4))
        y = np.array([[2]])
        nll = lattice.rnnt_neg_log_likes(logp[None], y, [1], [1])
        want = -(logp[0, 0, 2] + logp[0, 1, 3])
        assert nll[0] == pytest.approx(want, abs=1e-12)

    def test_two_paths_t2_u1(self):
        rng = np.random.default_rng(12)
        logp = random_log_probs(rng, (2, 2, 4))
        y = np.array([[1]])
        nll = lattice.rnnt_neg_log_likes(logp[None], y, [2], [1])
        want = -rnnt_log_prob_enumerated(logp, [1])
        assert nll[0] == pytest.approx(want, abs=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(1000 + seed)
        t_total = int(rng.integers(1, 5))
        u_total = int(rng.integers(0, 4))
        v = int(rng.integers(1, 4))
        logp = random_log_probs(rng, (t_total, u_total + 1, v + 1))
        y = rng.integers(0, v, size=u_total)
        nll = lattice.rnnt_neg_log_likes(logp[None], y[None], [t_total], [u_total])
        want = -rnnt_log_prob_enumerated(logp, y)
        assert abs(nll[0] - want) / max(abs(want), 1e-12) <= 1e-6

    def test_alpha_beta_totals_agree(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            t_total = int(rng.integers(1, 6))
            u_total = int(rng.integers(0, 4))
            logp = random_log_probs(rng, (t_total, u_total + 1, 5))
            y = rng.integers(0, 4, size=u_total)
            lat = lattice.rnnt_lattice(logp, y)
            assert lat.total_from_alpha == pytest.approx(lat.total_from_beta, abs=1e-6)

    def test_anti_diagonal_posterior_sums(self):
        rng = np.random.default_rng(14)
        t_total, u_total = 4, 2
        logp = random_log_probs(rng, (t_total, u_total + 1, 4))
        y = rng.integers(0, 3, size=u_total)
        post = lattice.rnnt_lattice(logp, y).posterior()
        for d in range(t_total + u_total):
            tot = sum(post[u, d - u] for u in range(max(0, d - t_total + 1), min(u_total, d) + 1))
            assert tot == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(2000 + seed)
        logp = rng.normal(size=(3, 3, 4)) - 1.0
        y = rng.integers(0, 3, size=2)

        def f(t):
            four = ops.reshape(t, (1,) + t.shape)
            return ops.sum_all(lattice.rnnt_losses(four, y[None], [3], [2]))

        assert finite_diff_check(f, Tensor(logp), h=1e-5) <= 1e-4

    def test_batched_matches_singles(self):
        rng = np.random.default_rng(15)
        items = []
        for _ in range(3):
            t_total = int(rng.integers(2, 5))
            u_total = int(rng.integers(1, 3))
            logp = random_log_probs(rng, (t_total, u_total + 1, 4))
            y = rng.integers(0, 3, size=u_total)
            items.append((logp, y, t_total, u_total))
        t_max = max(i[2] for i in items)
        u_max = max(i[3] for i in items)
        packed = np.zeros((3, t_max, u_max + 1, 4))
        ys = np.zeros((3, u_max), dtype=np.int64)
        for b, (logp, y, tt, uu) in enumerate(items):
            packed[b, :tt, : uu + 1] = logp
            ys[b, :uu] = y
        nll = lattice.rnnt_neg_log_likes(packed, ys, [i[2] for i in items], [i[3] for i in items])
        for b, (logp, y, tt, uu) in enumerate(items):
            want = lattice.rnnt_neg_log_likes(logp[None], y[None], [tt], [uu])[0]
            assert nll[b] == pytest.approx(want, abs=1e-10)

    def test_vocab_permutation_covariance(self):
        rng = np.random.default_rng(16)
        logp = random_log_probs(rng, (3, 3, 5))
        y = np.array([1, 3])
        perm = np.array([2, 0, 3, 1])  # content permutation; blank stays last
        permuted = logp.copy()
        permuted[..., perm] = logp[..., np.arange(4)]
        y_perm = perm[y]
        a = lattice.rnnt_neg_log_likes(logp[None], y[None], [3], [2])[0]
        b = lattice.rnnt_neg_log_likes(permuted[None], y_perm[None], [3], [2])[0]
        assert a == pytest.approx(b, abs=1e-12)


class TestCtcLoss:
    def test_single_frame(self):
        rng = np.random.default_rng(20)
        logp = random_log_probs(rng, (1, 4))
        nll = lattice.ctc_neg_log_likes(logp[None], np.array([[2]]), [1], [1])
        assert nll[0] == pytest.approx(-logp[0, 2], abs=1e-12)

    def test_three_paths_t2_u1(self):
        rng = np.random.default_rng(21)
        logp = random_log_probs(rng, (2, 4))
        p = np.exp(logp)
        a, blank = 1, 3
        want = -math.log(p[0, a] * p[1, a] + p[0, a] * p[1, blank] + p[0, blank] * p[1, a])
        nll = lattice.ctc_neg_log_likes(logp[None], np.array([[a]]), [2], [1])
        assert nll[0] == pytest.approx(want, abs=1e-9)

    def test_repeated_token_needs_separating_blank(self):
        rng = np.random.default_rng(22)
        logp = random_log_probs(rng, (2, 4))
        with pytest.raises(NoAlignmentPathError):
            lattice.ctc_neg_log_likes(logp[None], np.array([[1, 1]]), [2], [2])
        # with three frames it becomes feasible
        logp3 = random_log_probs(rng, (3, 4))
        nll = lattice.ctc_neg_log_likes(logp3[None], np.array([[1, 1]]), [3], [2])
        assert np.isfinite(nll[0])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(3000 + seed)
        t_total = int(rng.integers(1, 5))
        v = int(rng.integers(1, 4))
        u_total = int(rng.integers(1, 4))
        y = rng.integers(0, v, size=u_total)
        if lattice.ctc_min_frames(y) > t_total:
            y = y[:1]
            u_total = 1
            if t_total < 1:
                return
        logp = random_log_probs(rng, (t_total, v + 1))
        nll = lattice.ctc_neg_log_likes(logp[None], y[None], [t_total], [u_total])
        want = -ctc_log_prob_enumerated(logp, y)
        assert abs(nll[0] - want) / max(abs(want), 1e-12) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(4000 + seed)
        logp = rng.normal(size=(4, 4)) - 1.0
        y = np.array([0, 2])

        def f(t):
            three = ops.reshape(t, (1,) + t.shape)
            return ops.sum_all(lattice.ctc_losses(three, y[None], [4], [2]))

        assert finite_diff_check(f, Tensor(logp), h=1e-5) <= 1e-4

    def test_vocab_permutation_covariance(self):
        rng = np.random.default_rng(23)
        logp = random_log_probs(rng, (4, 5))
        y = np.array([0, 2])
        perm = np.array([3, 1, 0, 2])
        permuted = logp.copy()
        permuted[..., perm] = logp[..., np.arange(4)]
        a = lattice.ctc_neg_log_likes(logp[None], y[None], [4], [2])[0]
        b = lattice.ctc_neg_log_likes(permuted[None], perm[y][None], [4], [2])[0]
        assert a == pytest.approx(b, abs=1e-12)

    def test_spec_surface_from_raw_logits(self):
        rng = np.random.default_rng(24)
        logits = rng.normal(size=(3, 4))
        got = ctc_loss(Tensor(logits), np.array([1]))
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        want = -ctc_log_prob_enumerated(logp, [1])
        assert got.item() == pytest.approx(want, abs=1e-9)


class TestAlignerPermutation:
    def test_vocab_relabeling_leaves_loss_unchanged(self, micro_aligner):
        # permute logits columns and targets consistently at the CE level
        rng = np.random.default_rng(25)
        logits = rng.normal(size=(3, 5))
        y = np.array([2, 4, EOS])
        prior = np.full(5, 0.2)
        perm = np.array([4, 2, 0, 1, 3])
        permuted = logits.copy()
        permuted[:, perm] = logits[:, np.arange(5)]
        a = smoothed_ce(logits, y, 0.1, prior)
        b = smoothed_ce(permuted, perm[y], 0.1, prior)  # uniform prior is permutation-invariant
        assert a == pytest.approx(b, abs=1e-12)


class TestBatchPrior:
    def _batch_of_tokens(self, token_lists):
        utts = []
        for toks in token_lists:
            toks = np.asarray(toks + [EOS])
            feats = np.zeros((max(len(toks), 1) + 2, 3))
            bounds = np.stack([np.arange(len(toks) - 1), np.arange(len(toks) - 1)], axis=1)
            from alignlab.data import Utterance

            utts.append(Utterance(feats, toks, bounds))
        return Batch(utts)

    def test_degenerate_batch(self):
        batch = self._batch_of_tokens([[2, 2, 2]])
        prior = batch_prior_estimate(batch, 4)
        assert prior.argmax() == 2
        assert (prior > 0).all()

    def test_ratio_approaches_counts_as_floor_vanishes(self):
        batch = self._batch_of_tokens([[2, 2, 2, 3]])
        prior = batch_prior_estimate(batch, 4, floor=1e-9)
        assert prior[2] / prior[3] == pytest.approx(3.0, rel=1e-6)

    def test_sums_to_one(self):
        batch = self._batch_of_tokens([[2, 3], [3, 3, 2]])
        prior = batch_prior_estimate(batch, 6)
        assert prior.sum() == pytest.approx(1.0, abs=1e-12)
