"""Forward-backward dynamic programming for the RNN-T and CTC losses.

Both losses marginalize over all monotone lattice paths that emit the
target sequence, computed entirely in log space.  The tape ops carry
hand-derived gradients (arc occupancy posteriors), which is both much
faster than composing the recursions from primitive ops and the form the
diagnostics need anyway.

RNN-T node convention: ``alpha[u, t]`` is the log-mass of paths that have
emitted ``u`` labels and fully consumed ``t`` frames, before any emission
at frame ``t``.  A label advances ``u`` within the frame; a blank consumes
the frame.  Every path ends with the blank at node (U, T'-1), so each path
makes exactly T' + U moves and crosses each anti-diagonal u + t once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.tensor import Tensor, record_op
from .errors import NoAlignmentPathError

NEG_INF = -np.inf


def _as_label_matrix(ys, u_lens, batch: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.int64)
    if ys.ndim == 1:
        ys = ys.reshape(1, -1)
    assert ys.shape[0] == batch and len(u_lens) == batch
    return ys


# ---------------------------------------------------------------------------
# RNN-T


def _rnnt_gather(logp: np.ndarray, ys: np.ndarray, t_lens, u_lens):
    """Split per-node label/blank log-probs, padding invalid nodes to -inf."""
    b, t_max, u1_max, _ = logp.shape
    blank = logp.shape[-1] - 1
    u_idx = np.minimum(np.arange(u1_max - 1), np.asarray(u_lens)[:, None] - 1)
    safe_ys = np.take_along_axis(ys, np.maximum(u_idx, 0), axis=1)
    label_lp = np.take_along_axis(
        logp[:, :, :-1, :], safe_ys[:, None, :, None], axis=3
    )[..., 0]
    blank_lp = logp[..., blank].copy()
    t_grid = np.arange(t_max)[None, :, None]
    u_grid = np.arange(u1_max)[None, None, :]
    t_ok = t_grid < np.asarray(t_lens)[:, None, None]
    label_lp = np.where(t_ok & (u_grid[:, :, :-1] < np.asarray(u_lens)[:, None, None]), label_lp, NEG_INF)
    blank_lp = np.where(t_ok & (u_grid <= np.asarray(u_lens)[:, None, None]), blank_lp, NEG_INF)
    return label_lp, blank_lp


def rnnt_alpha(label_lp: np.ndarray, blank_lp: np.ndarray) -> np.ndarray:
    b, t_max, u_max = label_lp.shape
    alpha = np.full((b, u_max + 1, t_max), NEG_INF)
    alpha[:, 0, 0] = 0.0
    for t in range(t_max):
        if t > 0:
            alpha[:, 0, t] = alpha[:, 0, t - 1] + blank_lp[:, t - 1, 0]
        for u in range(1, u_max + 1):
            via_label = alpha[:, u - 1, t] + label_lp[:, t, u - 1]
            if t > 0:
                via_blank = alpha[:, u, t - 1] + blank_lp[:, t - 1, u]
                alpha[:, u, t] = np.logaddexp(via_blank, via_label)
            else:
                alpha[:, u, t] = via_label
    return alpha


def rnnt_beta(label_lp: np.ndarray, blank_lp: np.ndarray, t_lens, u_lens) -> np.ndarray:
    b, t_max, u_max = label_lp.shape
    beta = np.full((b, u_max + 1, t_max), NEG_INF)
    bb = np.arange(b)
    t_last = np.asarray(t_lens) - 1
    beta[bb, np.asarray(u_lens), t_last] = blank_lp[bb, t_last, np.asarray(u_lens)]
    for t in range(t_max - 1, -1, -1):
        for u in range(u_max, -1, -1):
            best = beta[:, u, t]
            if u < u_max:
                best = np.logaddexp(best, label_lp[:, t, u] + beta[:, u + 1, t])
            if t < t_max - 1:
                best = np.logaddexp(best, blank_lp[:, t, u] + beta[:, u, t + 1])
            beta[:, u, t] = best
    return beta


def rnnt_neg_log_likes(logp: np.ndarray, ys, t_lens, u_lens) -> np.ndarray:
    """Per-utterance -log P(y | frames) from batched node log-probs."""
    ys = _as_label_matrix(ys, u_lens, logp.shape[0])
    label_lp, blank_lp = _rnnt_gather(logp, ys, t_lens, u_lens)
    alpha = rnnt_alpha(label_lp, blank_lp)
    bb = np.arange(logp.shape[0])
    t_last = np.asarray(t_lens) - 1
    z = alpha[bb, np.asarray(u_lens), t_last] + blank_lp[bb, t_last, np.asarray(u_lens)]
    if not np.isfinite(z).all():
        raise NoAlignmentPathError("no valid transducer path; loss is +inf")
    return -z


def rnnt_grad(logp: np.ndarray, ys, t_lens, u_lens):
    """Returns (neg log-likes [B], d(nll_b)/dlogp [B, T, U+1, V+1])."""
    ys = _as_label_matrix(ys, u_lens, logp.shape[0])
    b, t_max, u1_max, _ = logp.shape
    blank = logp.shape[-1] - 1
    label_lp, blank_lp = _rnnt_gather(logp, ys, t_lens, u_lens)
    alpha = rnnt_alpha(label_lp, blank_lp)
    beta = rnnt_beta(label_lp, blank_lp, t_lens, u_lens)
    bb = np.arange(b)
    t_last = np.asarray(t_lens) - 1
    z = alpha[bb, np.asarray(u_lens), t_last] + blank_lp[bb, t_last, np.asarray(u_lens)]
    if not np.isfinite(z).all():
        raise NoAlignmentPathError("no valid transducer path; loss is +inf")

    grad = np.zeros_like(logp)
    # label arcs: (u, t) -> (u+1, t)
    with np.errstate(invalid="ignore"):
        post_label = np.exp(
            alpha[:, :-1, :].transpose(0, 2, 1) + label_lp + beta[:, 1:, :].transpose(0, 2, 1)
            - z[:, None, None]
        )
    post_label = np.nan_to_num(post_label, nan=0.0, posinf=0.0)
    u_grid = np.arange(u1_max - 1)
    t_grid = np.arange(t_max)
    tt, uu = np.meshgrid(t_grid, u_grid, indexing="ij")
    for i in range(b):
        labels = ys[i]
        uidx = np.minimum(uu, max(int(u_lens[i]) - 1, 0))
        np.subtract.at(grad[i], (tt, uu, labels[uidx]), post_label[i])
    # blank arcs: (u, t) -> (u, t+1), terminating at (U, T-1)
    beta_next = np.full((b, u1_max, t_max), NEG_INF)
    beta_next[:, :, : t_max - 1] = beta[:, :, 1:]
    beta_next[bb, np.asarray(u_lens), t_last] = 0.0
    with np.errstate(invalid="ignore"):
        post_blank = np.exp(blank_lp + (alpha + beta_next).transpose(0, 2, 1) - z[:, None, None])
    post_blank = np.nan_to_num(post_blank, nan=0.0, posinf=0.0)
    grad[..., blank] -= post_blank
    return -z, grad


def rnnt_losses(logp: Tensor, ys, t_lens, u_lens) -> Tensor:
    """Tape op: [B, T, U+1, V+1] node log-probs -> [B] losses."""
    nll, grad = rnnt_grad(logp.values, ys, t_lens, u_lens)
    out = Tensor(nll)

    def vjp(g):
        return (grad * g[:, None, None, None],)

    return record_op("rnnt_losses", out, (logp,), vjp)


@dataclass
class RnntLattice:
    """Forward/backward grids for one utterance, for diagnostics."""

    alpha: np.ndarray  # [(U+1), T']
    beta: np.ndarray  # [(U+1), T']
    label_lp: np.ndarray  # [U, T'] label arc log-prob at each node
    blank_lp: np.ndarray  # [(U+1), T']

    @property
    def total_from_alpha(self) -> float:
        return float(self.alpha[-1, -1] + self.blank_lp[-1, -1])

    @property
    def total_from_beta(self) -> float:
        return float(self.beta[0, 0])

    def posterior(self) -> np.ndarray:
        """Node occupancy exp(alpha + beta - Z), [(U+1), T']."""
        with np.errstate(invalid="ignore"):
            p = np.exp(self.alpha + self.beta - self.total_from_beta)
        return np.nan_to_num(p, nan=0.0, posinf=0.0)


def rnnt_lattice(logp: np.ndarray, y) -> RnntLattice:
    y = np.asarray(y, dtype=np.int64)
    t_max = logp.shape[0]
    u = len(y)
    label_lp, blank_lp = _rnnt_gather(logp[None], y[None], [t_max], [u])
    alpha = rnnt_alpha(label_lp, blank_lp)[0]
    beta = rnnt_beta(label_lp, blank_lp, [t_max], [u])[0]
    return RnntLattice(alpha=alpha, beta=beta,
                       label_lp=label_lp[0].T.copy(), blank_lp=blank_lp[0].T.copy())


# ---------------------------------------------------------------------------
# CTC


def ctc_min_frames(y: np.ndarray) -> int:
    y = np.asarray(y)
    repeats = int(np.sum(y[1:] == y[:-1])) if len(y) > 1 else 0
    return len(y) + repeats


def _ctc_extend(ys: np.ndarray, u_lens, blank: int):
    b, u_max = ys.shape
    s_max = 2 * u_max + 1
    ext = np.full((b, s_max), blank, dtype=np.int64)
    ext[:, 1::2] = ys
    s_lens = 2 * np.asarray(u_lens) + 1
    skip_ok = np.zeros((b, s_max), dtype=bool)
    skip_ok[:, 3::2] = ys[:, 1:] != ys[:, :-1]
    valid = np.arange(s_max)[None, :] < s_lens[:, None]
    return ext, s_lens, skip_ok & valid, valid


def ctc_alpha(lp_ext: np.ndarray, skip_ok: np.ndarray, valid: np.ndarray) -> np.ndarray:
    b, t_max, s_max = lp_ext.shape
    alpha = np.full((b, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = lp_ext[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = np.where(valid[:, 1], lp_ext[:, 0, 1], NEG_INF)
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        stay = prev
        step = np.full_like(prev, NEG_INF)
        step[:, 1:] = prev[:, :-1]
        skip = np.full_like(prev, NEG_INF)
        skip[:, 2:] = prev[:, :-2]
        skip = np.where(skip_ok, skip, NEG_INF)
        alpha[:, t] = lp_ext[:, t] + np.logaddexp(np.logaddexp(stay, step), skip)
        alpha[:, t] = np.where(valid, alpha[:, t], NEG_INF)
    return alpha


def _ctc_total(alpha: np.ndarray, bb, t_last, s_lens) -> np.ndarray:
    z = alpha[bb, t_last, s_lens - 1]
    two = s_lens >= 2
    if two.any():
        z = np.where(two, np.logaddexp(z, alpha[bb, t_last, np.maximum(s_lens - 2, 0)]), z)
    return z


def ctc_beta(lp_ext: np.ndarray, skip_ok: np.ndarray, valid: np.ndarray,
             t_lens, s_lens) -> np.ndarray:
    b, t_max, s_max = lp_ext.shape
    beta = np.full((b, t_max, s_max), NEG_INF)
    bb = np.arange(b)
    t_last = np.asarray(t_lens) - 1
    beta[bb, t_last, s_lens - 1] = lp_ext[bb, t_last, s_lens - 1]
    two = s_lens >= 2
    beta[bb[two], t_last[two], s_lens[two] - 2] = lp_ext[bb[two], t_last[two], s_lens[two] - 2]
    for t in range(t_max - 2, -1, -1):
        nxt = beta[:, t + 1]
        stay = nxt
        step = np.full_like(nxt, NEG_INF)
        step[:, :-1] = nxt[:, 1:]
        skip = np.full_like(nxt, NEG_INF)
        skip[:, :-2] = np.where(skip_ok[:, 2:], nxt[:, 2:], NEG_INF)
        fresh = lp_ext[:, t] + np.logaddexp(np.logaddexp(stay, step), skip)
        fresh = np.where(valid, fresh, NEG_INF)
        # rows at or past an utterance's last frame keep their initialization
        active = (t < t_last)[:, None]
        beta[:, t] = np.where(active, fresh, beta[:, t])
    return beta


def ctc_neg_log_likes(logp: np.ndarray, ys, t_lens, u_lens) -> np.ndarray:
    """Per-utterance -log P(y | frames); blank is the last vocab index."""
    ys = _as_label_matrix(ys, u_lens, logp.shape[0])
    blank = logp.shape[-1] - 1
    for i in range(logp.shape[0]):
        need = ctc_min_frames(ys[i, : int(u_lens[i])])
        if need > int(t_lens[i]):
            raise NoAlignmentPathError(
                f"targets need at least {need} frames under CTC collapsing, got {int(t_lens[i])}"
            )
    ext, s_lens, skip_ok, valid = _ctc_extend(ys, u_lens, blank)
    lp_ext = np.take_along_axis(logp, ext[:, None, :], axis=2)
    alpha = ctc_alpha(lp_ext, skip_ok, valid)
    bb = np.arange(logp.shape[0])
    t_last = np.asarray(t_lens) - 1
    z = _ctc_total(alpha, bb, t_last, s_lens)
    if not np.isfinite(z).all():
        raise NoAlignmentPathError("no valid CTC path; loss is +inf")
    return -z


def ctc_grad(logp: np.ndarray, ys, t_lens, u_lens):
    ys = _as_label_matrix(ys, u_lens, logp.shape[0])
    b, t_max, _ = logp.shape
    blank = logp.shape[-1] - 1
    for i in range(b):
        need = ctc_min_frames(ys[i, : int(u_lens[i])])
        if need > int(t_lens[i]):
            raise NoAlignmentPathError(
                f"targets need at least {need} frames under CTC collapsing, got {int(t_lens[i])}"
            )
    ext, s_lens, skip_ok, valid = _ctc_extend(ys, u_lens, blank)
    lp_ext = np.take_along_axis(logp, ext[:, None, :], axis=2)
    alpha = ctc_alpha(lp_ext, skip_ok, valid)
    beta = ctc_beta(lp_ext, skip_ok, valid, t_lens, s_lens)
    bb = np.arange(b)
    t_last = np.asarray(t_lens) - 1
    z = _ctc_total(alpha, bb, t_last, s_lens)
    if not np.isfinite(z).all():
        raise NoAlignmentPathError("no valid CTC path; loss is +inf")

    # alpha and beta both include the frame-t emission, so divide it out once
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - lp_ext - z[:, None, None])
    occ = np.nan_to_num(occ, nan=0.0, posinf=0.0)
    t_ok = (np.arange(t_max)[None, :] < np.asarray(t_lens)[:, None])[:, :, None]
    occ = np.where(t_ok & valid[:, None, :], occ, 0.0)
    grad = np.zeros_like(logp)
    s_max = ext.shape[1]
    tt = np.repeat(np.arange(t_max)[:, None], s_max, axis=1)
    for i in range(b):
        ss = np.repeat(ext[i][None, :], t_max, axis=0)
        np.subtract.at(grad[i], (tt, ss), occ[i])
    return -z, grad


def ctc_losses(logp: Tensor, ys, t_lens, u_lens) -> Tensor:
    """Tape op: [B, T, V+1] frame log-probs -> [B] losses."""
    nll, grad = ctc_grad(logp.values, ys, t_lens, u_lens)
    out = Tensor(nll)

    def vjp(g):
        return (grad * g[:, None, None],)

    return record_op("ctc_losses", out, (logp,), vjp)
