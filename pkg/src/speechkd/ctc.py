"""Alignment-free sequence loss: the forward algorithm over all
blank-augmented monotone alignments, with repeat-collapse.

The gradient with respect to the frame log-probabilities comes from the
alpha/beta occupancies, registered as a single custom primitive on the
active tape.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import NDArray
from .errors import InfeasibleTargetError, ShapeError, VocabularyError

_NEG_INF = -np.inf


def min_frames_for(targets) -> int:
    """Shortest frame count that can emit ``targets``: one frame per label
    plus a separating blank between equal neighbors."""
    repeats = sum(1 for i in range(1, len(targets)) if targets[i] == targets[i - 1])
    return len(targets) + repeats


def ctc_loss(log_probs, targets) -> NDArray:
    """Negative log-likelihood of ``targets`` under frame log-probs of
    shape (T, V+1), where column V is the blank. Differentiable.

    Raises InfeasibleTargetError when T is too small to emit the target
    (the likelihood would be zero, the loss infinite).
    """
    lp = dc.as_ndarray(log_probs)
    if lp.ndim != 2:
        raise ShapeError(f"expected (T, V+1) frame log-probs, got shape {lp.shape}")
    T, width = lp.shape
    blank = width - 1
    targets = [int(t) for t in targets]
    for t in targets:
        if not 0 <= t < blank:
            raise VocabularyError(f"target token {t} outside vocabulary of {blank}")
    L = len(targets)
    if T < min_frames_for(targets):
        raise InfeasibleTargetError(
            f"{T} frames cannot emit a target of {L} tokens with "
            f"{min_frames_for(targets) - L} repeat separations; loss is infinite"
        )

    # blank-augmented label sequence: blank, t1, blank, t2, ..., tL, blank
    S = 2 * L + 1
    labels = np.full(S, blank, dtype=np.int64)
    labels[1::2] = targets
    # skip transition s-2 -> s is legal when the label is not blank and
    # differs from the label two slots back
    skip_ok = np.zeros(S, dtype=bool)
    for s in range(2, S):
        skip_ok[s] = labels[s] != blank and labels[s] != labels[s - 2]

    x = lp.data.astype(np.float64)
    alpha = np.full((T, S), _NEG_INF)
    alpha[0, 0] = x[0, labels[0]]
    if S > 1:
        alpha[0, 1] = x[0, labels[1]]
    for t in range(1, T):
        stay = alpha[t - 1]
        prev = np.concatenate(([_NEG_INF], alpha[t - 1, :-1]))
        acc = np.logaddexp(stay, prev)
        if S > 2:
            skip = np.concatenate(([_NEG_INF, _NEG_INF], alpha[t - 1, :-2]))
            acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + x[t, labels]

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = np.logaddexp(log_z, alpha[T - 1, S - 2])
    out = NDArray(np.asarray(-log_z), requires_grad=lp.requires_grad)

    def bwd(g):
        beta = np.full((T, S), _NEG_INF)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + x[t + 1, labels]
            stay = nxt
            follow = np.concatenate((nxt[1:], [_NEG_INF]))
            acc = np.logaddexp(stay, follow)
            skip_to = np.concatenate((np.where(skip_ok[2:], nxt[2:], _NEG_INF), [_NEG_INF, _NEG_INF]))
            beta[t] = np.logaddexp(acc, skip_to)
        gamma = np.exp(alpha + beta - log_z)
        grad = np.zeros_like(x)
        for s in range(S):
            grad[:, labels[s]] += gamma[:, s]
        dc._accum(lp, (-grad * float(g)).astype(lp.dtype))

    dc._record(out, bwd)
    return out
