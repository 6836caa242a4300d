"""Conformer-style encoder with strided subsampling and rotary attention.

The encoder consumes raw feature frames and produces the embedding sequence
the decoder reads one-frame-per-token.  Attention is non-causal over the
full (or per-chunk) context.  Every self-attention layer can record its
probability matrices for alignment analysis; recording is observation-only
and never changes the computed embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import Tensor, ops
from .errors import ConfigError, DimensionError


@dataclass
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_mult: int = 4
    conv1d_kernel: int = 7
    subsample_layers: int = 1
    subsample_kernel: int = 3
    subsample_stride: int = 2
    subsample_channels: int = 16
    position_mode: str = "rotary"
    rope_base: float = 10000.0
    feature_dim: int = 16

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.position_mode not in ("rotary", "none"):
            raise ConfigError(f"unknown position_mode {self.position_mode!r}")
        if self.position_mode == "rotary" and (self.model_dim // self.num_heads) % 2 != 0:
            raise ConfigError("rotary embedding needs an even head dimension")
        if self.subsample_layers < 0 or self.subsample_stride < 1:
            raise ConfigError("invalid subsampling settings")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def subsampled_len(self, num_frames: int) -> int:
        n = num_frames
        for _ in range(self.subsample_layers):
            n = -(-n // self.subsample_stride)
        return n


@dataclass
class AttentionRecord:
    """Per-layer self-attention probabilities, each ``[heads, T', T']``."""

    probs: List[np.ndarray] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.probs)

    def layer(self, index: int) -> np.ndarray:
        if not (0 <= index < len(self.probs)):
            raise IndexError(f"layer {index} outside recorded range 0..{len(self.probs) - 1}")
        return self.probs[index]

    def head_average(self, index: int) -> np.ndarray:
        return self.layer(index).mean(axis=0)


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1]))
    return rng.normal(scale=1.0 / np.sqrt(max(fan_in, 1)), size=shape)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, w), b)


class Encoder:
    """Owns the encoder parameter group; forward passes are methods."""

    def __init__(self, cfg: EncoderConfig, params: Optional[Dict[str, Tensor]] = None,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.params = params if params is not None else self.init_params(cfg, rng or np.random.default_rng(0))

    @staticmethod
    def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
        p: Dict[str, np.ndarray] = {}
        k, ch = cfg.subsample_kernel, cfg.subsample_channels
        c_in = 1
        f_dim = cfg.feature_dim
        for i in range(cfg.subsample_layers):
            p[f"sub{i}.w"] = _glorot(rng, (k * k * c_in, ch))
            p[f"sub{i}.b"] = np.zeros(ch)
            c_in = ch
            f_dim = -(-f_dim // cfg.subsample_stride)
        in_dim = f_dim * c_in if cfg.subsample_layers else cfg.feature_dim
        p["proj.w"] = _glorot(rng, (in_dim, cfg.model_dim))
        p["proj.b"] = np.zeros(cfg.model_dim)
        d, m = cfg.model_dim, cfg.ffn_mult
        for l in range(cfg.num_layers):
            pre = f"layer{l}."
            for ffn in ("ffn1", "ffn2"):
                p[pre + ffn + ".ln.g"] = np.ones(d)
                p[pre + ffn + ".ln.b"] = np.zeros(d)
                p[pre + ffn + ".w1"] = _glorot(rng, (d, m * d))
                p[pre + ffn + ".b1"] = np.zeros(m * d)
                p[pre + ffn + ".w2"] = _glorot(rng, (m * d, d))
                p[pre + ffn + ".b2"] = np.zeros(d)
            p[pre + "att.ln.g"] = np.ones(d)
            p[pre + "att.ln.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "att." + name] = _glorot(rng, (d, d))
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + "att." + name] = np.zeros(d)
            p[pre + "conv.ln.g"] = np.ones(d)
            p[pre + "conv.ln.b"] = np.zeros(d)
            p[pre + "conv.pw1.w"] = _glorot(rng, (d, 2 * d))
            p[pre + "conv.pw1.b"] = np.zeros(2 * d)
            p[pre + "conv.dw.w"] = _glorot(rng, (cfg.conv1d_kernel, d))
            p[pre + "conv.dw.b"] = np.zeros(d)
            p[pre + "conv.pw2.w"] = _glorot(rng, (d, d))
            p[pre + "conv.pw2.b"] = np.zeros(d)
            p[pre + "out.ln.g"] = np.ones(d)
            p[pre + "out.ln.b"] = np.zeros(d)
        return {name: Tensor(v, requires_grad=True) for name, v in p.items()}

    # -- forward pieces ----------------------------------------------------

    def conv_subsample(self, feats: Tensor) -> Tensor:
        """[B, T, F] -> [B, T', model_dim] via strided 2-D convs + projection."""
        cfg = self.cfg
        x = ops.reshape(feats, feats.shape + (1,))
        for i in range(cfg.subsample_layers):
            win = ops.window_slices_2d(x, cfg.subsample_kernel, cfg.subsample_stride)
            x = ops.relu(linear(win, self.params[f"sub{i}.w"], self.params[f"sub{i}.b"]))
        b, t = x.shape[0], x.shape[1]
        flat = ops.reshape(x, (b, t, int(np.prod(x.shape[2:]))))
        return linear(flat, self.params["proj.w"], self.params["proj.b"])

    def _ffn(self, x: Tensor, pre: str) -> Tensor:
        p = self.params
        h = ops.layer_norm(x, p[pre + ".ln.g"], p[pre + ".ln.b"])
        h = ops.silu(linear(h, p[pre + ".w1"], p[pre + ".b1"]))
        return linear(h, p[pre + ".w2"], p[pre + ".b2"])

    def _attention(self, x: Tensor, pre: str, key_mask: Optional[np.ndarray],
                   positions: np.ndarray, record: Optional[list]) -> Tensor:
        cfg = self.cfg
        p = self.params
        b, t, d = x.shape
        h_dim, heads = cfg.head_dim, cfg.num_heads
        normed = ops.layer_norm(x, p[pre + ".ln.g"], p[pre + ".ln.b"])
        q = linear(normed, p[pre + ".wq"], p[pre + ".bq"])
        k = linear(normed, p[pre + ".wk"], p[pre + ".bk"])
        v = linear(normed, p[pre + ".wv"], p[pre + ".bv"])

        def split(z):
            return ops.transpose(ops.reshape(z, (b, t, heads, h_dim)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        if cfg.position_mode == "rotary":
            q = ops.rope_apply(q, positions, cfg.rope_base)
            k = ops.rope_apply(k, positions, cfg.rope_base)
        scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(h_dim))
        if key_mask is not None:
            neg = np.where(key_mask > 0, 0.0, -1e30).reshape(b, 1, 1, t)
            scores = ops.add(scores, neg)
        probs = ops.softmax_rows(scores)
        if record is not None:
            record.append(probs.values.copy())
        ctx = ops.matmul(probs, v)
        merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return linear(merged, p[pre + ".wo"], p[pre + ".bo"])

    def _conv_module(self, x: Tensor, pre: str) -> Tensor:
        p = self.params
        h = ops.layer_norm(x, p[pre + ".ln.g"], p[pre + ".ln.b"])
        h = linear(h, p[pre + ".pw1.w"], p[pre + ".pw1.b"])
        d = x.shape[-1]
        gate = ops.sigmoid(ops.narrow(h, -1, d, d))
        h = ops.mul(ops.narrow(h, -1, 0, d), gate)
        win = ops.window_slices_1d(h, self.cfg.conv1d_kernel)
        h = ops.sum_axis(ops.mul(win, p[pre + ".dw.w"]), axis=2)
        h = ops.silu(ops.add(h, p[pre + ".dw.b"]))
        return linear(h, p[pre + ".pw2.w"], p[pre + ".pw2.b"])

    def conformer_block(self, x: Tensor, layer: int, key_mask: Optional[np.ndarray],
                        positions: np.ndarray, record: Optional[list] = None) -> Tensor:
        """Half-step FFN, self-attention, depthwise conv, FFN, final norm."""
        p = self.params
        pre = f"layer{layer}."
        if key_mask is not None:
            mask3 = key_mask.reshape(x.shape[0], x.shape[1], 1)

        def remask(z: Tensor) -> Tensor:
            # padded rows must stay exactly zero so the depthwise conv sees
            # the same zeros a single-utterance SAME padding would provide
            return z if key_mask is None else ops.mul(z, mask3)

        x = remask(ops.add(x, ops.scale(self._ffn(x, pre + "ffn1"), 0.5)))
        x = remask(ops.add(x, self._attention(x, pre + "att", key_mask, positions, record)))
        x = remask(ops.add(x, self._conv_module(x, pre + "conv")))
        x = ops.add(x, ops.scale(self._ffn(x, pre + "ffn2"), 0.5))
        x = ops.layer_norm(x, p[pre + "out.ln.g"], p[pre + "out.ln.b"])
        return remask(x)

    def forward_batch(self, feats: Tensor, frame_lens: np.ndarray,
                      record_attention: bool = False) -> Tuple[Tensor, np.ndarray, Optional[AttentionRecord]]:
        """Encode padded ``[B, T, F]``; padded positions stay exactly zero."""
        if feats.ndim != 3:
            raise DimensionError(f"expected [B, T, F] features, got {feats.shape}")
        cfg = self.cfg
        out_lens = np.array([cfg.subsampled_len(int(n)) for n in frame_lens])
        x = self.conv_subsample(feats)
        b, t_sub = x.shape[0], x.shape[1]
        mask = (np.arange(t_sub)[None, :] < out_lens[:, None]).astype(x.values.dtype)
        x = ops.mul(x, mask.reshape(b, t_sub, 1))
        positions = np.arange(t_sub)
        records: Optional[list] = [] if record_attention else None
        for l in range(cfg.num_layers):
            x = self.conformer_block(x, l, mask, positions, records)
        rec = None
        if record_attention:
            rec = AttentionRecord(records)
        return x, out_lens, rec

    def encode(self, features: np.ndarray, record_attention: bool = False
               ) -> Tuple[Tensor, Optional[AttentionRecord]]:
        """Single-utterance surface: [T, F] -> ([T', d], optional record)."""
        feats = features if isinstance(features, Tensor) else Tensor(features)
        batched = ops.reshape(feats, (1,) + feats.shape)
        h, out_lens, rec = self.forward_batch(batched, np.array([feats.shape[0]]), record_attention)
        h1 = ops.reshape(h, h.shape[1:])
        if rec is not None:
            rec = AttentionRecord([p[0] for p in rec.probs])
        return h1, rec

    def encode_chunked(self, features: np.ndarray, chunk_frames: int
                       ) -> Tuple[Tensor, List[int]]:
        """Subsample the whole sequence, then run the conformer stack on
        independent chunks of ``chunk_frames`` embedding frames.

        Returns the re-concatenated embedding and the chunk start offsets.
        """
        if chunk_frames < 1:
            raise ConfigError("chunk_frames must be >= 1")
        feats = features if isinstance(features, Tensor) else Tensor(features)
        batched = ops.reshape(feats, (1,) + feats.shape)
        x = self.conv_subsample(batched)
        t_sub = x.shape[1]
        starts = list(range(0, t_sub, chunk_frames))
        pieces = []
        for s in starts:
            size = min(chunk_frames, t_sub - s)
            chunk = ops.narrow(x, 1, s, size)
            positions = np.arange(size)
            for l in range(self.cfg.num_layers):
                chunk = self.conformer_block(chunk, l, None, positions, None)
            pieces.append(chunk)
        h = pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=1)
        return ops.reshape(h, h.shape[1:]), starts
