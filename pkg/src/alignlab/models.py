"""Decoder networks and training losses for all four model heads.

Heads share machinery: a text-only LSTM prediction network, and a joint
that projects the acoustic and text embeddings to a shared width, sums,
applies tanh, and projects to the vocabulary.  The frame-synchronous head
consumes exactly the diagonal (h_i, g_i) pairs, so it realizes only U x V
logits; the transducer head realizes the full T' x (U+1) grid and adds a
blank output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import lattice
from .core import Tensor, no_grad, ops
from .data import EOS, SOS, Batch
from .encoder import Encoder, EncoderConfig, _glorot, linear
from .errors import ConfigError, ContractError, LengthError

MODEL_KINDS = ("aligner", "nonar_aligner", "rnnt", "ctc")


@dataclass
class LabelSmoothingSpec:
    epsilon: float = 0.1
    prior_mode: str = "batch_counts"  # or "uniform"

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0):
            raise ConfigError("label smoothing epsilon must lie in [0, 1)")
        if self.prior_mode not in ("uniform", "batch_counts"):
            raise ConfigError(f"unknown prior_mode {self.prior_mode!r}")


@dataclass
class ModelConfig:
    vocab_size: int = 32
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 32
    pred_hidden: int = 64
    joint_dim: int = 64

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3")


@dataclass
class PredictionState:
    """LSTM carry for one hypothesis; starts zeroed with <SOS> pending."""

    h: np.ndarray
    c: np.ndarray
    last_token: int = SOS


class PredictionNet:
    """Single-layer LSTM over embedded tokens; sees no acoustics."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int,
                 params: Optional[Dict[str, Tensor]] = None,
                 rng: Optional[np.random.Generator] = None):
        self.vocab_size = vocab_size
        self.hidden = hidden
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = {
                "emb": Tensor(_glorot(rng, (vocab_size, embed_dim)), requires_grad=True),
                "wx": Tensor(_glorot(rng, (embed_dim, 4 * hidden)), requires_grad=True),
                "wh": Tensor(_glorot(rng, (hidden, 4 * hidden)), requires_grad=True),
                "b": Tensor(np.zeros(4 * hidden), requires_grad=True),
            }
        self.params = params

    def init_state(self) -> PredictionState:
        return PredictionState(h=np.zeros(self.hidden), c=np.zeros(self.hidden), last_token=SOS)

    def _gates(self, x: Tensor, h: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        p = self.params
        z = ops.add(ops.add(ops.matmul(x, p["wx"]), ops.matmul(h, p["wh"])), p["b"])
        w = self.hidden
        i = ops.sigmoid(ops.narrow(z, -1, 0, w))
        f = ops.sigmoid(ops.narrow(z, -1, w, w))
        g = ops.tanh(ops.narrow(z, -1, 2 * w, w))
        o = ops.sigmoid(ops.narrow(z, -1, 3 * w, w))
        return i, f, g, o

    def step_tensors(self, h: Tensor, c: Tensor, tokens: np.ndarray) -> Tuple[Tensor, Tensor]:
        """One batched LSTM step: [B, w] carries, [B] token ids."""
        if (tokens < 0).any() or (tokens >= self.vocab_size).any():
            raise ContractError(f"token ids outside vocabulary of size {self.vocab_size}")
        x = ops.take_rows(self.params["emb"], tokens)
        i, f, g, o = self._gates(x, h)
        c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
        h_new = ops.mul(o, ops.tanh(c_new))
        return h_new, c_new

    def forward_prefixes(self, tokens_with_sos: np.ndarray) -> Tensor:
        """Outputs for every history prefix: [B, L] ids -> [B, L, w].

        Column j of the output conditions on tokens_with_sos[:, : j + 1].
        """
        b, length = tokens_with_sos.shape
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        outs = []
        for j in range(length):
            h, c = self.step_tensors(h, c, tokens_with_sos[:, j])
            outs.append(ops.reshape(h, (b, 1, self.hidden)))
        return outs[0] if length == 1 else ops.concat(outs, axis=1)

    def step(self, state: PredictionState, token: int) -> Tuple[np.ndarray, PredictionState]:
        """Inference step for one hypothesis; returns (g, new state)."""
        with no_grad():
            h, c = self.step_tensors(Tensor(state.h.reshape(1, -1)), Tensor(state.c.reshape(1, -1)),
                                     np.array([token]))
        return h.values[0], PredictionState(h=h.values[0], c=c.values[0], last_token=int(token))


class Joint:
    """f(h_i, g_j) = tanh(h W_h + g W_g) W_o + b_o; no inner bias so that
    zero inputs yield exactly the output bias."""

    def __init__(self, enc_dim: int, pred_dim: int, joint_dim: int, num_outputs: int,
                 params: Optional[Dict[str, Tensor]] = None,
                 rng: Optional[np.random.Generator] = None):
        self.num_outputs = num_outputs
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = {
                "wh": Tensor(_glorot(rng, (enc_dim, joint_dim)), requires_grad=True),
                "wg": Tensor(_glorot(rng, (pred_dim, joint_dim)), requires_grad=True),
                "wo": Tensor(_glorot(rng, (joint_dim, num_outputs)), requires_grad=True),
                "bo": Tensor(np.zeros(num_outputs), requires_grad=True),
            }
        self.params = params

    def combine(self, proj_h: Tensor, proj_g: Tensor) -> Tensor:
        p = self.params
        return linear(ops.tanh(ops.add(proj_h, proj_g)), p["wo"], p["bo"])

    def paired(self, h: Tensor, g: Tensor) -> Tensor:
        """Diagonal pairing: [.., d] with [.., w] -> [.., V]."""
        p = self.params
        return self.combine(ops.matmul(h, p["wh"]), ops.matmul(g, p["wg"]))

    def grid(self, h: Tensor, g: Tensor) -> Tensor:
        """All-pairs pairing: [B, T, d] x [B, U1, w] -> [B, T, U1, V]."""
        p = self.params
        ph = ops.matmul(h, p["wh"])
        pg = ops.matmul(g, p["wg"])
        b, t, j = ph.shape
        u1 = pg.shape[1]
        return self.combine(ops.reshape(ph, (b, t, 1, j)), ops.reshape(pg, (b, 1, u1, j)))

    def logits(self, h_i: np.ndarray, g_i: np.ndarray) -> np.ndarray:
        """Inference-path evaluation for one (frame, state) pair."""
        with no_grad():
            out = self.paired(Tensor(h_i.reshape(1, -1)), Tensor(g_i.reshape(1, -1)))
        return out.values[0]


def batch_prior_estimate(batch: Batch, vocab_size: int, floor: float = 1.0) -> np.ndarray:
    """Normalized label counts over the batch with an additive floor."""
    if len(batch) == 0:
        raise ContractError("batch must be nonempty")
    counts = np.full(vocab_size, float(floor))
    for u in batch.utterances:
        ids, c = np.unique(u.tokens, return_counts=True)
        counts[ids] += c
    return counts / counts.sum()


def smoothing_targets(tokens: np.ndarray, vocab_size: int, spec: LabelSmoothingSpec,
                      prior: Optional[np.ndarray] = None) -> np.ndarray:
    """q = (1 - eps) * onehot + eps * prior, rows summing to one."""
    if spec.prior_mode == "uniform" or prior is None:
        prior = np.full(vocab_size, 1.0 / vocab_size)
    onehot = np.eye(vocab_size)[tokens]
    return (1.0 - spec.epsilon) * onehot + spec.epsilon * prior


class AlignerModel:
    """Frame-synchronous head: token i is read off embedding frame i."""

    kind = "aligner"

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.vocab_size = cfg.vocab_size
        self.encoder = Encoder(cfg.encoder, rng=rng)
        self.pred = PredictionNet(cfg.vocab_size, cfg.embed_dim, cfg.pred_hidden, rng=rng)
        self.joint = Joint(cfg.encoder.model_dim, cfg.pred_hidden, cfg.joint_dim,
                           cfg.vocab_size, rng=rng)

    @property
    def params(self) -> Dict[str, Tensor]:
        out = {}
        out.update({f"enc.{k}": v for k, v in self.encoder.params.items()})
        out.update({f"pred.{k}": v for k, v in self.pred.params.items()})
        out.update({f"joint.{k}": v for k, v in self.joint.params.items()})
        return out

    def noise_param_names(self):
        return [k for k in self.params if k.startswith("pred.")]

    def _check_lengths(self, out_lens: np.ndarray, token_lens: np.ndarray) -> None:
        bad = np.nonzero(np.asarray(token_lens) > np.asarray(out_lens))[0]
        if len(bad):
            i = int(bad[0])
            raise LengthError(
                f"utterance {i}: {int(token_lens[i])} labels exceed {int(out_lens[i])} encoded frames; "
                "the encoder cannot be downsampled below the text length"
            )

    def diagonal_logits(self, h: Tensor, tokens: np.ndarray, token_lens: np.ndarray) -> Tensor:
        """Teacher-forced logits at the U diagonal pairs, [B, U_max, V]."""
        u_max = tokens.shape[1]
        h_diag = ops.narrow(h, 1, 0, u_max)
        y_prev = np.concatenate([np.full((tokens.shape[0], 1), SOS, dtype=np.int64),
                                 tokens[:, :-1]], axis=1)
        g = self.pred.forward_prefixes(y_prev)
        return self.joint.paired(h_diag, g)

    def loss_batch(self, batch: Batch, smoothing: LabelSmoothingSpec,
                   prior: Optional[np.ndarray] = None) -> Tuple[Tensor, int]:
        """Summed smoothed cross-entropy over real tokens; masked frames and
        frames beyond U contribute nothing (their gradient is exactly zero)."""
        h, out_lens, _ = self.encoder.forward_batch(Tensor(batch.features), batch.frame_lens)
        self._check_lengths(out_lens, batch.token_lens)
        logits = self.diagonal_logits(h, batch.tokens, batch.token_lens)
        logp = ops.log_softmax_rows(logits)
        q = smoothing_targets(batch.tokens, self.vocab_size, smoothing, prior)
        q = q * batch.token_mask[:, :, None]
        loss = ops.neg(ops.sum_all(ops.mul(logp, q)))
        return loss, int(batch.token_mask.sum())

    def loss(self, h: Tensor, y: np.ndarray, smoothing: LabelSmoothingSpec,
             prior: Optional[np.ndarray] = None) -> Tensor:
        """Single-utterance loss on a precomputed embedding [T', d]."""
        y = np.asarray(y, dtype=np.int64)
        u = len(y)
        if u > h.shape[0]:
            raise LengthError(f"{u} labels exceed {h.shape[0]} encoded frames")
        if y[-1] != EOS:
            raise ContractError("target sequence must end with <EOS>")
        hb = ops.reshape(h, (1,) + h.shape)
        logits = self.diagonal_logits(hb, y[None, :], np.array([u]))
        logp = ops.log_softmax_rows(logits)
        q = smoothing_targets(y[None, :], self.vocab_size, smoothing, prior)
        return ops.neg(ops.sum_all(ops.mul(logp, q)))


class NonARAligner:
    """Per-frame independent classifier under the same frame-wise loss.

    The head is the shared joint with its text path removed:
    tanh(h W_h) W_o + b_o.
    """

    kind = "nonar_aligner"

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.vocab_size = cfg.vocab_size
        self.encoder = Encoder(cfg.encoder, rng=rng)
        d = cfg.encoder.model_dim
        self.head = {
            "wh": Tensor(_glorot(rng, (d, cfg.joint_dim)), requires_grad=True),
            "wo": Tensor(_glorot(rng, (cfg.joint_dim, cfg.vocab_size)), requires_grad=True),
            "bo": Tensor(np.zeros(cfg.vocab_size), requires_grad=True),
        }

    @property
    def params(self) -> Dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"joint.{k}": v for k, v in self.head.items()})
        return out

    def noise_param_names(self):
        return []

    def head_logits(self, h: Tensor) -> Tensor:
        p = self.head
        return linear(ops.tanh(ops.matmul(h, p["wh"])), p["wo"], p["bo"])

    def frame_logits(self, h: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.head_logits(Tensor(h)).values

    def loss_batch(self, batch: Batch, smoothing: LabelSmoothingSpec,
                   prior: Optional[np.ndarray] = None) -> Tuple[Tensor, int]:
        h, out_lens, _ = self.encoder.forward_batch(Tensor(batch.features), batch.frame_lens)
        bad = np.nonzero(batch.token_lens > out_lens)[0]
        if len(bad):
            raise LengthError(f"utterance {int(bad[0])}: labels exceed encoded frames")
        u_max = batch.tokens.shape[1]
        logits = self.head_logits(ops.narrow(h, 1, 0, u_max))
        logp = ops.log_softmax_rows(logits)
        q = smoothing_targets(batch.tokens, self.vocab_size, smoothing, prior)
        q = q * batch.token_mask[:, :, None]
        loss = ops.neg(ops.sum_all(ops.mul(logp, q)))
        return loss, int(batch.token_mask.sum())


class RNNTModel:
    """Transducer head: blank output appended as the last vocab index."""

    kind = "rnnt"

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.vocab_size = cfg.vocab_size
        self.blank = cfg.vocab_size
        self.encoder = Encoder(cfg.encoder, rng=rng)
        self.pred = PredictionNet(cfg.vocab_size, cfg.embed_dim, cfg.pred_hidden, rng=rng)
        self.joint = Joint(cfg.encoder.model_dim, cfg.pred_hidden, cfg.joint_dim,
                           cfg.vocab_size + 1, rng=rng)

    @property
    def params(self) -> Dict[str, Tensor]:
        out = {}
        out.update({f"enc.{k}": v for k, v in self.encoder.params.items()})
        out.update({f"pred.{k}": v for k, v in self.pred.params.items()})
        out.update({f"joint.{k}": v for k, v in self.joint.params.items()})
        return out

    def noise_param_names(self):
        return [k for k in self.params if k.startswith("pred.")]

    def grid_log_probs(self, h: Tensor, tokens: np.ndarray) -> Tensor:
        """Node log-probs over the full lattice, [B, T', U+1, V+1]."""
        b = tokens.shape[0]
        with_sos = np.concatenate([np.full((b, 1), SOS, dtype=np.int64), tokens], axis=1)
        g = self.pred.forward_prefixes(with_sos)
        logits = self.joint.grid(h, g)
        return ops.log_softmax_rows(logits)

    def loss_batch(self, batch: Batch, smoothing: Optional[LabelSmoothingSpec] = None,
                   prior: Optional[np.ndarray] = None) -> Tuple[Tensor, int]:
        if (batch.tokens >= self.vocab_size).any():
            raise ContractError("targets contain ids outside the vocabulary (blank is not writable)")
        h, out_lens, _ = self.encoder.forward_batch(Tensor(batch.features), batch.frame_lens)
        logp = self.grid_log_probs(h, batch.tokens)
        losses = lattice.rnnt_losses(logp, batch.tokens, out_lens, batch.token_lens)
        return ops.sum_all(losses), int(batch.token_mask.sum())

    def loss(self, h: Tensor, y: np.ndarray) -> Tensor:
        """Single-utterance transducer loss on a precomputed embedding."""
        y = np.asarray(y, dtype=np.int64)
        hb = ops.reshape(h, (1,) + h.shape)
        logp = self.grid_log_probs(hb, y[None, :])
        losses = lattice.rnnt_losses(logp, y[None, :], np.array([h.shape[0]]), np.array([len(y)]))
        return ops.sum_all(losses)


class CTCModel:
    """Frame-independent head with a blank output (last vocab index)."""

    kind = "ctc"

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.vocab_size = cfg.vocab_size
        self.blank = cfg.vocab_size
        self.encoder = Encoder(cfg.encoder, rng=rng)
        d = cfg.encoder.model_dim
        self.head = {
            "w": Tensor(_glorot(rng, (d, cfg.vocab_size + 1)), requires_grad=True),
            "b": Tensor(np.zeros(cfg.vocab_size + 1), requires_grad=True),
        }

    @property
    def params(self) -> Dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def noise_param_names(self):
        return []

    def head_logits(self, h: Tensor) -> Tensor:
        return linear(h, self.head["w"], self.head["b"])

    def frame_logits(self, h: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.head_logits(Tensor(h)).values

    def loss_batch(self, batch: Batch, smoothing: Optional[LabelSmoothingSpec] = None,
                   prior: Optional[np.ndarray] = None) -> Tuple[Tensor, int]:
        h, out_lens, _ = self.encoder.forward_batch(Tensor(batch.features), batch.frame_lens)
        logp = ops.log_softmax_rows(self.head_logits(h))
        losses = lattice.ctc_losses(logp, batch.tokens, out_lens, batch.token_lens)
        return ops.sum_all(losses), int(batch.token_mask.sum())


def ctc_loss(frame_logits: Tensor, y, blank: Optional[int] = None) -> Tensor:
    """Spec surface: CTC loss from raw frame logits [T', V+1]."""
    y = np.asarray(y, dtype=np.int64)
    logits = frame_logits if isinstance(frame_logits, Tensor) else Tensor(frame_logits)
    logp = ops.log_softmax_rows(ops.reshape(logits, (1,) + logits.shape))
    losses = lattice.ctc_losses(logp, y[None, :], np.array([logits.shape[0]]), np.array([len(y)]))
    return ops.sum_all(losses)


def build_model(kind: str, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
    if kind == "aligner":
        return AlignerModel(cfg, rng)
    if kind == "nonar_aligner":
        return NonARAligner(cfg, rng)
    if kind == "rnnt":
        return RNNTModel(cfg, rng)
    if kind == "ctc":
        return CTCModel(cfg, rng)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
