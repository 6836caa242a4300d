"""Synthetic aligned utterances, augmentations, and the ALNU1 container.

Each content token renders as a fixed per-token template vector (a seeded
unit vector) repeated for a sampled duration, plus Gaussian noise.  Silence
frames are pure noise.  Ground-truth frame boundaries are recorded exactly,
which is what makes alignment quality measurable downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, FileFormatError, ValidationError

SOS = 0
EOS = 1
FIRST_CONTENT = 2

_MAGIC_UTT = b"ALNU1"


@dataclass
class SynthConfig:
    """Synthetic-task settings; ids 0 and 1 are reserved for <SOS>/<EOS>."""

    vocab_size: int = 32
    feature_dim: int = 16
    duration_min: int = 3
    duration_max: int = 8
    noise_std: float = 0.3
    silence_pad_max: int = 3
    gap_prob: float = 0.1
    gap_max: int = 2
    max_frames: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3 (<SOS>, <EOS>, and content)")
        if not (1 <= self.duration_min <= self.duration_max):
            raise ConfigError(f"need 1 <= duration_min <= duration_max, got [{self.duration_min}, {self.duration_max}]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.feature_dim < 1 or self.max_frames < 1:
            raise ConfigError("feature_dim and max_frames must be positive")

    def templates(self) -> np.ndarray:
        """Fixed random unit template per token id, [V, F]."""
        rng = np.random.default_rng(self.seed)
        t = rng.normal(size=(self.vocab_size, self.feature_dim))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        t[SOS] = 0.0
        t[EOS] = 0.0
        return t


@dataclass
class Utterance:
    """Feature matrix with its token sequence and exact token boundaries.

    ``tokens`` always ends with <EOS>; ``boundaries`` holds one inclusive
    (start_frame, end_frame) pair per content token, in token order.
    """

    features: np.ndarray
    tokens: np.ndarray
    boundaries: np.ndarray
    uid: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.boundaries = np.asarray(self.boundaries, dtype=np.int64).reshape(-1, 2)
        self.validate()

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        t, u = self.num_frames, self.num_tokens
        if u < 1 or self.tokens[-1] != EOS:
            raise ValidationError("token sequence must end with <EOS>")
        if np.count_nonzero(self.tokens == EOS) != 1:
            raise ValidationError("token sequence must contain exactly one <EOS>")
        if u > t:
            raise ValidationError(f"token count {u} exceeds frame count {t}")
        if len(self.boundaries) != u - 1:
            raise ValidationError(f"expected {u - 1} boundary pairs, got {len(self.boundaries)}")
        if len(self.boundaries):
            starts, ends = self.boundaries[:, 0], self.boundaries[:, 1]
            if (starts > ends).any() or starts.min() < 0 or ends.max() >= t:
                raise ValidationError("boundaries must satisfy 0 <= start <= end < T")
            if not self._boundaries_ordered():
                raise ValidationError("boundaries must be non-overlapping and increasing in some time direction")

    def _boundaries_ordered(self) -> bool:
        b = self.boundaries
        if len(b) < 2:
            return True
        fwd = all(b[i + 1, 0] > b[i, 1] for i in range(len(b) - 1))
        rev = all(b[i + 1, 1] < b[i, 0] for i in range(len(b) - 1))
        return fwd or rev


def generate_utterance(cfg: SynthConfig, num_tokens: int, rng: Optional[np.random.Generator] = None,
                       uid: str = "") -> Utterance:
    """Render ``num_tokens`` content tokens plus silence into a feature matrix."""
    if num_tokens < 1:
        raise ConfigError("num_tokens must be >= 1")
    worst = num_tokens * cfg.duration_max + 2 * cfg.silence_pad_max + (num_tokens - 1) * cfg.gap_max
    if worst > cfg.max_frames:
        raise ConfigError(
            f"{num_tokens} tokens can need up to {worst} frames, exceeding max_frames={cfg.max_frames}"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    templates = cfg.templates()
    content_ids = rng.integers(FIRST_CONTENT, cfg.vocab_size, size=num_tokens)

    segments: List[np.ndarray] = []
    boundaries = np.zeros((num_tokens, 2), dtype=np.int64)
    cursor = 0

    lead = int(rng.integers(0, cfg.silence_pad_max + 1))
    segments.append(np.zeros((lead, cfg.feature_dim)))
    cursor += lead

    for i, tok in enumerate(content_ids):
        if i > 0 and cfg.gap_max > 0 and rng.random() < cfg.gap_prob:
            gap = int(rng.integers(1, cfg.gap_max + 1))
            segments.append(np.zeros((gap, cfg.feature_dim)))
            cursor += gap
        dur = int(rng.integers(cfg.duration_min, cfg.duration_max + 1))
        segments.append(np.tile(templates[tok], (dur, 1)))
        boundaries[i] = (cursor, cursor + dur - 1)
        cursor += dur

    trail = int(rng.integers(0, cfg.silence_pad_max + 1))
    segments.append(np.zeros((trail, cfg.feature_dim)))

    features = np.concatenate(segments, axis=0)
    if cfg.noise_std > 0:
        features = features + rng.normal(scale=cfg.noise_std, size=features.shape)
    tokens = np.concatenate([content_ids, [EOS]])
    return Utterance(features, tokens, boundaries, uid=uid)


@dataclass
class DataConfig:
    """Sampling recipe for a synthetic task: per-utterance token counts."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    tokens_min: int = 3
    tokens_max: int = 8

    def __post_init__(self):
        if not (1 <= self.tokens_min <= self.tokens_max):
            raise ConfigError("need 1 <= tokens_min <= tokens_max")

    def sample(self, rng: np.random.Generator, uid: str = "") -> Utterance:
        n = int(rng.integers(self.tokens_min, self.tokens_max + 1))
        return generate_utterance(self.synth, n, rng, uid=uid)


def make_dataset(cfg: DataConfig, count: int, seed: int, uid_prefix: str = "utt") -> List[Utterance]:
    """Reproducible utterance list; utterance i depends only on (seed, i)."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        out.append(cfg.sample(rng, uid=f"{uid_prefix}-{i:05d}"))
    return out


@dataclass
class Batch:
    """Utterances padded to a rectangle, with masks marking real positions."""

    utterances: List[Utterance]
    features: np.ndarray = field(init=False)
    frame_mask: np.ndarray = field(init=False)
    frame_lens: np.ndarray = field(init=False)
    tokens: np.ndarray = field(init=False)
    token_mask: np.ndarray = field(init=False)
    token_lens: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.utterances:
            raise ConfigError("batch must be nonempty")
        b = len(self.utterances)
        t_max = max(u.num_frames for u in self.utterances)
        u_max = max(u.num_tokens for u in self.utterances)
        f = self.utterances[0].features.shape[1]
        self.features = np.zeros((b, t_max, f))
        self.frame_mask = np.zeros((b, t_max))
        self.tokens = np.zeros((b, u_max), dtype=np.int64)
        self.token_mask = np.zeros((b, u_max))
        self.frame_lens = np.zeros(b, dtype=np.int64)
        self.token_lens = np.zeros(b, dtype=np.int64)
        for i, u in enumerate(self.utterances):
            t, n = u.num_frames, u.num_tokens
            self.features[i, :t] = u.features
            self.frame_mask[i, :t] = 1.0
            self.tokens[i, :n] = u.tokens
            self.token_mask[i, :n] = 1.0
            self.frame_lens[i] = t
            self.token_lens[i] = n

    def __len__(self) -> int:
        return len(self.utterances)


def concat_utterances(parts: Sequence[Utterance], uid: str = "") -> Utterance:
    """Append features along time; merge token sequences into one <EOS>."""
    features = np.concatenate([p.features for p in parts], axis=0)
    tokens = np.concatenate([p.tokens[:-1] for p in parts] + [[EOS]])
    offsets = np.cumsum([0] + [p.num_frames for p in parts[:-1]])
    boundaries = np.concatenate([p.boundaries + off for p, off in zip(parts, offsets)], axis=0)
    return Utterance(features, tokens, boundaries, uid=uid)


def concat_augment(batch: Batch, fraction: float, max_frames: int,
                   rng: np.random.Generator) -> Batch:
    """Replace ~``fraction`` of examples with 2-3 way concatenations.

    Partners are drawn from the same batch.  A concatenation that would
    exceed ``max_frames`` falls back to fewer partners, or to the original
    utterance when even a pair is too long.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ConfigError("fraction must lie in [0, 1]")
    longest = max(u.num_frames for u in batch.utterances)
    if max_frames < longest:
        raise ConfigError(f"max_frames={max_frames} below longest utterance ({longest} frames)")
    if fraction == 0.0:
        return batch
    utts = list(batch.utterances)
    n = len(utts)
    for i in range(n):
        if rng.random() >= fraction:
            continue
        extra = int(rng.integers(1, 3))  # 2- or 3-way concatenation
        partners = [utts[int(rng.integers(0, n))] for _ in range(extra)]
        parts = [batch.utterances[i]] + partners
        while len(parts) > 1 and sum(p.num_frames for p in parts) > max_frames:
            parts = parts[:-1]
        if len(parts) > 1:
            utts[i] = concat_utterances(parts, uid=batch.utterances[i].uid + "+cat")
    return Batch(utts)


def reverse_audio(u: Utterance) -> Utterance:
    """Reverse features along time; tokens keep their order.

    Boundaries are remapped to (T-1-end, T-1-start), so after reversal they
    run anti-monotonically with respect to token order.
    """
    t = u.num_frames
    flipped = u.features[::-1].copy()
    b = np.stack([t - 1 - u.boundaries[:, 1], t - 1 - u.boundaries[:, 0]], axis=1) if len(u.boundaries) else u.boundaries
    return Utterance(flipped, u.tokens.copy(), b, uid=u.uid)


def spec_augment(features: np.ndarray, time_masks: int, time_width: int,
                 freq_masks: int, freq_width: int, rng: np.random.Generator) -> np.ndarray:
    """Zero out random contiguous time spans and feature bands."""
    t, f = features.shape
    if time_masks and time_width > t:
        raise ConfigError(f"time mask width {time_width} exceeds {t} frames")
    if freq_masks and freq_width > f:
        raise ConfigError(f"freq mask width {freq_width} exceeds {f} features")
    out = features.copy()
    for _ in range(time_masks):
        if time_width > 0:
            start = int(rng.integers(0, t - time_width + 1))
            out[start:start + time_width, :] = 0.0
    for _ in range(freq_masks):
        if freq_width > 0:
            start = int(rng.integers(0, f - freq_width + 1))
            out[:, start:start + freq_width] = 0.0
    return out


def save_utterance(u: Utterance, path) -> None:
    t, n = u.num_frames, u.num_tokens
    f = u.features.shape[1]
    with open(path, "wb") as fh:
        fh.write(_MAGIC_UTT)
        fh.write(struct.pack("<III", t, n, f))
        fh.write(u.features.astype("<f4").tobytes())
        fh.write(u.tokens.astype("<u4").tobytes())
        fh.write(u.boundaries.astype("<u4").tobytes())


def load_features_file(path) -> Utterance:
    """Parse an ALNU1 container; malformed input raises with a byte offset."""
    blob = Path(path).read_bytes()
    if blob[:5] != _MAGIC_UTT:
        raise FileFormatError(f"{path}: bad magic at byte 0 (want {_MAGIC_UTT!r})")
    off = 5
    if len(blob) < off + 12:
        raise FileFormatError(f"{path}: truncated header at byte {len(blob)}")
    t, n, f = struct.unpack_from("<III", blob, off)
    off += 12
    need = 4 * (t * f + n + 2 * max(n - 1, 0))
    if len(blob) < off + need:
        raise FileFormatError(f"{path}: truncated payload at byte {len(blob)} (need {off + need})")
    features = np.frombuffer(blob, dtype="<f4", count=t * f, offset=off).reshape(t, f)
    off += 4 * t * f
    tokens = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    boundaries = np.frombuffer(blob, dtype="<u4", count=2 * (n - 1), offset=off).astype(np.int64).reshape(-1, 2)
    return Utterance(features.astype(np.float64), tokens, boundaries, uid=Path(path).stem)


def write_manifest(paths: Sequence, manifest_path) -> None:
    Path(manifest_path).write_text("".join(str(p) + "\n" for p in paths))


def read_manifest(manifest_path) -> List[str]:
    lines = Path(manifest_path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def load_manifest_utterances(manifest_path) -> List[Utterance]:
    base = Path(manifest_path).parent
    out = []
    for rel in read_manifest(manifest_path):
        p = Path(rel)
        out.append(load_features_file(p if p.is_absolute() else base / p))
    return out
