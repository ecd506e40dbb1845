"""Connectionist Temporal Classification: log-space forward algorithm with a
blank symbol, analytic gradient via the backward recursion, greedy decoding,
and a brute-force path-enumeration oracle for testing.

Convention: the blank is the LAST index of the log-probability matrix, i.e.
column V for a (T, V+1) input.  Log-zero is represented as -1e30 inside the
recursions so log-sum-exp never sees an actual -inf; the public functions
still return -inf for infeasible label/frame combinations.
"""

from __future__ import annotations

import itertools
import logging
import math

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

LOG_ZERO = -1e30


def _extended(label, blank):
    """Blank-augmented label: blank, l1, blank, l2, ..., blank."""
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def min_frames(label):
    """Fewest frames that can realize the label (repeats need a separating blank)."""
    rep = sum(1 for i in range(1, len(label)) if label[i] == label[i - 1])
    return len(label) + rep


def _validate(log_probs, label):
    lp = np.asarray(log_probs, dtype=np.float64)
    lab = np.asarray(label, dtype=np.int64)
    if lp.ndim != 2 or lp.shape[1] < 2:
        raise ValueError(f"log_probs must be (T, V+1), got {lp.shape}")
    blank = lp.shape[1] - 1
    if lab.size and (lab.min() < 0 or lab.max() >= blank):
        raise ValueError("label contains the blank id or an out-of-range symbol")
    return lp, lab, blank


def _alpha_table(lp, ext):
    """Forward table over blank-augmented states, all in log space."""
    t_len, s_len = lp.shape[0], len(ext)
    allow_skip = np.zeros(s_len, dtype=bool)
    allow_skip[2:] = (ext[2:] != ext[:-2]) & (ext[2:] != ext[-1])  # never skip into blank
    alpha = np.full((t_len, s_len), LOG_ZERO)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([LOG_ZERO], prev))[:s_len]
        skip = np.concatenate(([LOG_ZERO, LOG_ZERO], prev))[:s_len]
        skip = np.where(allow_skip, skip, LOG_ZERO)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]
    return alpha


def _beta_table(lp, ext):
    """Backward table; beta[t, s] excludes the emission at time t."""
    t_len, s_len = lp.shape[0], len(ext)
    allow_skip = np.zeros(s_len, dtype=bool)
    allow_skip[:-2] = (ext[:-2] != ext[2:]) & (ext[:-2] != ext[-1])
    beta = np.full((t_len, s_len), LOG_ZERO)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.concatenate((nxt, [LOG_ZERO]))[1:s_len + 1]
        skip = np.concatenate((nxt, [LOG_ZERO, LOG_ZERO]))[2:s_len + 2]
        skip = np.where(allow_skip, skip, LOG_ZERO)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)
    return beta


def ctc_log_likelihood(log_probs, label):
    """Log probability of the label under all blank-augmented alignments.

    Returns -inf when no alignment fits in the available frames.  The
    training loss is the negation of this value.
    """
    lp, lab, blank = _validate(log_probs, label)
    if lp.shape[0] < min_frames(lab):
        return -math.inf
    ext = _extended(lab, blank)
    alpha = _alpha_table(lp, ext)
    last = alpha[-1, -1]
    if len(ext) > 1:
        last = np.logaddexp(last, alpha[-1, -2])
    ll = float(last)
    if ll <= LOG_ZERO / 2:
        return -math.inf
    return min(ll, 0.0)  # a total probability cannot exceed 1


def ctc_gradient(log_probs, label):
    """d log-likelihood / d log_probs, i.e. per-cell posterior occupancy."""
    lp, lab, blank = _validate(log_probs, label)
    if lp.shape[0] < min_frames(lab):
        raise ValueError("gradient undefined for an infeasible label")
    ext = _extended(lab, blank)
    alpha = _alpha_table(lp, ext)
    beta = _beta_table(lp, ext)
    ll = alpha[-1, -1]
    if len(ext) > 1:
        ll = np.logaddexp(ll, alpha[-1, -2])
    occ = np.exp(alpha + beta - ll)  # (T, S)
    grad = np.zeros_like(lp)
    for s, sym in enumerate(ext):
        grad[:, sym] += occ[:, s]
    return grad


def ctc_loss_node(log_probs_node, label):
    """Autodiff node for -log-likelihood, or None when infeasible."""
    lp = log_probs_node.value
    lab = np.asarray(label, dtype=np.int64)
    ll = ctc_log_likelihood(lp, lab)
    if ll == -math.inf:
        return None
    grad = ctc_gradient(lp, lab)

    def vjp(g):
        return (-float(g) * grad,)

    return ad.custom((log_probs_node,), -ll, vjp, "ctc_loss")


def ctc_brute_force(log_probs, label):
    """Oracle: enumerate every frame path and sum the ones collapsing to label."""
    lp, lab, blank = _validate(log_probs, label)
    t_len, v1 = lp.shape
    if v1 ** t_len > 10 ** 7:
        raise ValueError(f"brute force refused: {v1}^{t_len} paths exceed 1e7")
    target = list(lab)
    total = -math.inf
    for path in itertools.product(range(v1), repeat=t_len):
        collapsed = []
        prev = None
        for sym in path:
            if sym != prev and sym != blank:
                collapsed.append(sym)
            prev = sym
        if collapsed == target:
            score = sum(lp[t, sym] for t, sym in enumerate(path))
            total = np.logaddexp(total, score) if total != -math.inf else score
    if total == -math.inf:
        return -math.inf
    return min(float(total), 0.0)


def ctc_greedy_decode(log_probs):
    """Per-frame argmax, collapse adjacent repeats, drop blanks."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError(f"log_probs must be 2-D, got shape {lp.shape}")
    blank = lp.shape[1] - 1
    path = lp.argmax(axis=1)
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(int(sym))
        prev = sym
    return out
