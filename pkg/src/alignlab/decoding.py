"""Inference for all heads, with exact step-count instrumentation.

The frame-synchronous head consumes one embedding frame per emitted token,
so its decoder performs exactly one joint evaluation per token (including
the end token).  The transducer must additionally emit a blank to advance
each frame, costing T' + U evaluations.  Every decode function counts its
joint evaluations and reports them in the result; benchmarks and tests
assert on these counters rather than sampling.

Tie-breaking everywhere is "lowest token id wins" so decodes are
deterministic and beam size 1 reproduces greedy exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import no_grad
from .data import EOS, SOS
from .errors import ConfigError, ContractError
from .models import PredictionState


@dataclass
class BeamConfig:
    beam_size: int = 1
    debias_gamma: float = 0.0
    max_tokens: int = 1000
    path_merging: bool = False
    max_symbols_per_frame: int = 8
    length_normalize: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.debias_gamma < 0:
            raise ConfigError("debias_gamma must be >= 0")


@dataclass
class ChunkPlan:
    chunk_frames: int
    boundary_policy: str = "carry"  # carry | reset | reset_prime
    prime_tokens: int = 0

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ConfigError("chunk_frames must be >= 1")
        if self.boundary_policy not in ("carry", "reset", "reset_prime"):
            raise ConfigError(f"unknown boundary_policy {self.boundary_policy!r}")
        if self.prime_tokens < 0:
            raise ConfigError("prime_tokens must be >= 0")


@dataclass
class Hypothesis:
    """One partial decode; ``tokens`` holds raw emissions including <EOS>."""

    tokens: Tuple[int, ...] = ()
    log_prob: float = 0.0
    pred_state: Optional[PredictionState] = None
    frame_cursor: int = 0
    finished: bool = False

    def content(self) -> Tuple[int, ...]:
        return tuple(t for t in self.tokens if t != EOS)


@dataclass
class DecodeResult:
    tokens: np.ndarray
    log_prob: float
    unterminated: bool
    joint_evals: int
    nbest: Optional[List[Tuple[Tuple[int, ...], float]]] = None

    def as_record(self, uid: str) -> str:
        toks = " ".join(str(t) for t in self.tokens)
        flags = "unterminated" if self.unterminated else "-"
        return f"{uid}\t{toks}\t{self.log_prob:.6f}\t{flags}\t{self.joint_evals}"


class _Counter:
    __slots__ = ("n",)

    def __init__(self):
        self.n = 0


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def debias_posterior(p: np.ndarray, gamma: float) -> np.ndarray:
    """Zero entries below gamma/V and renormalize.

    If everything falls below the threshold the argmax alone survives with
    probability one.
    """
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise ContractError(f"input must be a probability vector (sum {p.sum():.8f})")
    if gamma == 0.0:
        return p.copy()
    keep = p >= gamma / len(p)
    if not keep.any():
        out = np.zeros_like(p)
        out[p.argmax()] = 1.0
        return out
    out = np.where(keep, p, 0.0)
    return out / out.sum()


def _result_from(hyp: Hypothesis, counter: _Counter, unterminated: bool,
                 nbest: Optional[list] = None) -> DecodeResult:
    return DecodeResult(tokens=np.array(hyp.content(), dtype=np.int64),
                        log_prob=hyp.log_prob, unterminated=unterminated,
                        joint_evals=counter.n, nbest=nbest)


def _initial_hypothesis(model) -> Hypothesis:
    _, state = model.pred.step(model.pred.init_state(), SOS)
    return Hypothesis(pred_state=state)


def aligner_greedy_decode(h: np.ndarray, model, max_tokens: Optional[int] = None) -> DecodeResult:
    """Argmax one token per embedding frame until <EOS> or the frame limit."""
    t_total = h.shape[0]
    limit = t_total if max_tokens is None else min(t_total, max_tokens)
    counter = _Counter()
    hyp = _initial_hypothesis(model)
    with no_grad():
        for i in range(limit):
            logits = model.joint.logits(h[i], hyp.pred_state.h)
            counter.n += 1
            tok = int(logits.argmax())
            hyp.log_prob += float(_log_softmax(logits)[tok])
            hyp.tokens += (tok,)
            hyp.frame_cursor += 1
            if tok == EOS:
                hyp.finished = True
                break
            _, hyp.pred_state = model.pred.step(hyp.pred_state, tok)
    return _result_from(hyp, counter, unterminated=not hyp.finished)


def _beam_scan(h: np.ndarray, model, cfg: BeamConfig, init_hyps: Sequence[Hypothesis],
               counter: _Counter, frame_range: Tuple[int, int],
               token_budget: int) -> List[Hypothesis]:
    """Expand hypotheses over ``frame_range`` of ``h``; <EOS> retires a
    hypothesis from the scan.  Returns all survivors (finished or not),
    pruned to the beam at every step."""
    start, end = frame_range
    live = [replace(hyp, finished=False, frame_cursor=start) for hyp in init_hyps]
    retired: List[Hypothesis] = []
    budget = token_budget
    with no_grad():
        while live and budget > 0:
            cursor = live[0].frame_cursor
            if cursor >= end:
                retired.extend(live)
                break
            candidates: List[Hypothesis] = list(retired)
            for hyp in live:
                logits = model.joint.logits(h[cursor], hyp.pred_state.h)
                counter.n += 1
                post = debias_posterior(np.exp(_log_softmax(logits)), cfg.debias_gamma)
                for tok in np.nonzero(post > 0)[0]:
                    candidates.append(Hypothesis(
                        tokens=hyp.tokens + (int(tok),),
                        log_prob=hyp.log_prob + float(np.log(post[tok])),
                        pred_state=hyp.pred_state,
                        frame_cursor=cursor + 1,
                        finished=(tok == EOS),
                    ))
            candidates.sort(key=lambda c: (-c.log_prob, c.tokens))
            kept = candidates[: cfg.beam_size]
            live, retired = [], []
            for c in kept:
                if c.finished:
                    retired.append(c)
                else:
                    _, c.pred_state = model.pred.step(c.pred_state, c.tokens[-1])
                    live.append(c)
            budget -= 1
        retired.extend(live)
    return retired


def aligner_beam_decode(h: np.ndarray, model, cfg: BeamConfig) -> DecodeResult:
    """Beam over per-frame token choices; no path merging exists because
    every hypothesis is already a distinct token sequence."""
    counter = _Counter()
    init = _initial_hypothesis(model)
    t_total = h.shape[0]
    survivors = _beam_scan(h, model, cfg, [init], counter, (0, t_total), cfg.max_tokens)
    return _pick_best(survivors, cfg, counter)


def _score(hyp: Hypothesis, cfg: BeamConfig) -> float:
    if cfg.length_normalize and hyp.tokens:
        return hyp.log_prob / len(hyp.tokens)
    return hyp.log_prob


def _pick_best(survivors: List[Hypothesis], cfg: BeamConfig, counter: _Counter) -> DecodeResult:
    finished = [s for s in survivors if s.finished]
    pool = finished if finished else survivors
    pool = sorted(pool, key=lambda s: (-_score(s, cfg), s.tokens))
    best = pool[0]
    nbest = [(s.content(), s.log_prob) for s in pool]
    return _result_from(best, counter, unterminated=not best.finished, nbest=nbest)


def rnnt_greedy_decode(h: np.ndarray, model, max_symbols_per_frame: int = 8) -> DecodeResult:
    """Emit argmax tokens until blank wins (capped), then advance the frame."""
    if max_symbols_per_frame < 1:
        raise ConfigError("max_symbols_per_frame must be >= 1")
    blank = model.blank
    counter = _Counter()
    hyp = _initial_hypothesis(model)
    with no_grad():
        for t in range(h.shape[0]):
            emitted = 0
            while emitted < max_symbols_per_frame:
                logits = model.joint.logits(h[t], hyp.pred_state.h)
                counter.n += 1
                tok = int(logits.argmax())
                hyp.log_prob += float(_log_softmax(logits)[tok])
                if tok == blank:
                    break
                hyp.tokens += (tok,)
                _, hyp.pred_state = model.pred.step(hyp.pred_state, tok)
                emitted += 1
            hyp.frame_cursor = t + 1
    hyp.finished = True
    return _result_from(hyp, counter, unterminated=False)


def rnnt_beam_decode(h: np.ndarray, model, cfg: BeamConfig) -> DecodeResult:
    """Frame-synchronous transducer beam.

    With ``path_merging`` on, hypotheses sharing a token sequence are
    combined by log-sum-exp at every frame boundary; with it off they
    compete as independent entries (the usual approximation).
    """
    blank = model.blank
    counter = _Counter()
    beams = [_initial_hypothesis(model)]
    with no_grad():
        for t in range(h.shape[0]):
            # "done" hypotheses chose blank and wait at the frame boundary;
            # they compete with still-expanding ones at every pruning so that
            # beam size 1 commits exactly like greedy.
            done: List[Hypothesis] = []
            frontier = beams
            for _ in range(cfg.max_symbols_per_frame):
                candidates: List[Hypothesis] = list(done)
                for hyp in frontier:
                    logits = model.joint.logits(h[t], hyp.pred_state.h)
                    counter.n += 1
                    post = debias_posterior(np.exp(_log_softmax(logits)), cfg.debias_gamma)
                    for tok in np.nonzero(post > 0)[0]:
                        lp = hyp.log_prob + float(np.log(post[tok]))
                        if tok == blank:
                            candidates.append(replace(hyp, log_prob=lp, frame_cursor=t + 1,
                                                      finished=True))
                        else:
                            candidates.append(Hypothesis(tokens=hyp.tokens + (int(tok),),
                                                         log_prob=lp, pred_state=hyp.pred_state,
                                                         frame_cursor=t))
                candidates.sort(key=lambda c: (-c.log_prob, c.tokens))
                kept = candidates[: cfg.beam_size]
                done = [c for c in kept if c.finished]
                frontier = []
                for c in kept:
                    if not c.finished:
                        _, c.pred_state = model.pred.step(c.pred_state, c.tokens[-1])
                        frontier.append(c)
                if not frontier:
                    break
            # hypotheses still expanding at the cap advance without a blank score
            done.extend(replace(hyp, frame_cursor=t + 1) for hyp in frontier)
            if cfg.path_merging:
                done = _merge_paths(done)
            done.sort(key=lambda c: (-c.log_prob, c.tokens))
            beams = [replace(b, finished=False) for b in done[: cfg.beam_size]]
    for b in beams:
        b.finished = True
    return _pick_best(beams, cfg, counter)


def _merge_paths(hyps: List[Hypothesis]) -> List[Hypothesis]:
    by_tokens = {}
    for hyp in hyps:
        prev = by_tokens.get(hyp.tokens)
        if prev is None:
            by_tokens[hyp.tokens] = hyp
        else:
            keep = prev if prev.log_prob >= hyp.log_prob else hyp
            merged = replace(keep, log_prob=float(np.logaddexp(prev.log_prob, hyp.log_prob)))
            by_tokens[hyp.tokens] = merged
    return list(by_tokens.values())


def nonar_decode(frame_logits: np.ndarray) -> DecodeResult:
    """Per-frame argmax, truncated at the earliest <EOS>; no dedup."""
    picks = frame_logits.argmax(axis=-1)
    lsm = frame_logits - frame_logits.max(axis=-1, keepdims=True)
    lsm = lsm - np.log(np.exp(lsm).sum(axis=-1, keepdims=True))
    tokens: List[int] = []
    log_prob = 0.0
    unterminated = True
    for i, tok in enumerate(picks):
        log_prob += float(lsm[i, tok])
        if tok == EOS:
            unterminated = False
            break
        tokens.append(int(tok))
    return DecodeResult(tokens=np.array(tokens, dtype=np.int64), log_prob=log_prob,
                        unterminated=unterminated, joint_evals=0)


def _apply_boundary_policy(hyp: Hypothesis, model, plan: ChunkPlan) -> Hypothesis:
    if plan.boundary_policy == "carry":
        return hyp
    _, state = model.pred.step(model.pred.init_state(), SOS)
    if plan.boundary_policy == "reset_prime" and plan.prime_tokens > 0:
        for tok in hyp.content()[-plan.prime_tokens:]:
            _, state = model.pred.step(state, tok)
    return replace(hyp, pred_state=state)


def chunked_decode(features: np.ndarray, model, plan: ChunkPlan, cfg: BeamConfig) -> DecodeResult:
    """Long-form decode: subsample once, encode fixed-size chunks
    independently, then scan the re-concatenated embedding.

    Within a chunk, frames after the first <EOS> are never evaluated;
    decoding resumes at the start of the next chunk after applying the
    boundary policy to the prediction state.  A chunk that exhausts its
    frames without <EOS> flows into the next chunk the same way.
    """
    with no_grad():
        h_t, starts = model.encoder.encode_chunked(features, plan.chunk_frames)
    h = h_t.values
    t_total = h.shape[0]
    counter = _Counter()
    hyps = [_initial_hypothesis(model)]
    for idx, start in enumerate(starts):
        end = min(start + plan.chunk_frames, t_total)
        if idx > 0:
            hyps = [_apply_boundary_policy(hyp, model, plan) for hyp in hyps]
        survivors = _beam_scan(h, model, cfg, hyps, counter, (start, end), cfg.max_tokens)
        survivors.sort(key=lambda s: (-_score(s, cfg), s.tokens))
        hyps = survivors[: cfg.beam_size]
    return _pick_best(hyps, cfg, counter)
