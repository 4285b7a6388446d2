"""Dynamic-programming sequence losses: transducer, CTC, LM cross-entropy.

All losses consume already log-normalized scores (blank at index 0) and
never renormalize. The transducer and CTC losses come in three routes:
an analytic forward/backward lattice (used in training), a brute-force
path/alignment enumeration (the oracle), and, for the transducer, a
recursion built from tape primitives so the analytic gradient can be
cross-checked against plain reverse-mode differentiation.
"""

from __future__ import annotations

from itertools import combinations, product

import numpy as np

from . import tensor as tt
from .errors import NumericsError, ShapeError

NEG_INF = -np.inf


def _check_joint(logp, y):
    logp = np.asarray(logp)
    if logp.ndim != 3:
        raise ShapeError("transducer_loss", logp.shape)
    T, up1, vext = logp.shape
    if T < 1:
        raise NumericsError("transducer_loss: T must be >= 1")
    y = [int(v) for v in y]
    if len(y) != up1 - 1:
        raise ShapeError("transducer_loss", logp.shape, (len(y),))
    if not np.isfinite(logp).all():
        raise NumericsError("transducer_loss: non-finite logits")
    if any(v < 1 or v >= vext for v in y):
        raise NumericsError("transducer_loss: target out of [1, V]")
    return logp, y, T, up1 - 1


def transducer_forward_backward(logp, y):
    """Alpha/beta lattice over a T x (U+1) x V_ext log-prob tensor.

    From cell (t, u) a blank consumes frame t, a label emits y[u+1] while
    staying on frame t; every path ends with the blank at (T-1, U).
    Returns (loss, grad, alpha, beta).
    """
    logp, y, T, U = _check_joint(logp, y)
    blank = logp[:, :, 0]
    lab = np.full((T, U), NEG_INF, dtype=logp.dtype)
    for u in range(U):
        lab[:, u] = logp[:, u, y[u]]

    alpha = np.full((T, U + 1), NEG_INF, dtype=logp.dtype)
    alpha[0, 0] = 0.0
    for u in range(1, U + 1):
        alpha[0, u] = alpha[0, u - 1] + lab[0, u - 1]
    for t in range(1, T):
        alpha[t, :] = alpha[t - 1, :] + blank[t - 1, :]
        for u in range(1, U + 1):
            alpha[t, u] = np.logaddexp(alpha[t, u], alpha[t, u - 1] + lab[t, u - 1])

    beta = np.full((T, U + 1), NEG_INF, dtype=logp.dtype)
    beta[T - 1, U] = blank[T - 1, U]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = lab[T - 1, u] + beta[T - 1, u + 1]
    for t in range(T - 2, -1, -1):
        beta[t, :] = blank[t, :] + beta[t + 1, :]
        for u in range(U - 1, -1, -1):
            beta[t, u] = np.logaddexp(beta[t, u], lab[t, u] + beta[t, u + 1])

    log_z = beta[0, 0]
    loss = -log_z

    grad = np.zeros_like(logp)
    # blank occupancy: exp(alpha + blank + beta_next - logZ)
    occ_blank = np.full((T, U + 1), NEG_INF, dtype=logp.dtype)
    if T > 1:
        occ_blank[: T - 1, :] = alpha[: T - 1, :] + blank[: T - 1, :] + beta[1:, :]
    occ_blank[T - 1, U] = alpha[T - 1, U] + blank[T - 1, U]
    grad[:, :, 0] = -np.exp(occ_blank - log_z)
    for u in range(U):
        occ = alpha[:, u] + lab[:, u] + beta[:, u + 1]
        grad[:, u, y[u]] -= np.exp(occ - log_z)
    return float(loss), grad, alpha, beta


def transducer_loss(logits, y):
    """Transducer loss as a tape operation with the analytic lattice gradient.

    ``logits`` may be a Tensor (recorded) or a plain array (returns
    (loss, grad) floats).
    """
    if isinstance(logits, tt.Tensor):
        loss, grad, _, _ = transducer_forward_backward(logits.data, y)
        out = tt.Tensor.__new__(tt.Tensor)
        out.data = np.asarray(loss, dtype=logits.data.dtype)
        out.grad = None
        tape = tt.active_tape()
        needs = tape is not None and logits.requires_grad
        out.requires_grad = needs
        if needs:
            def backward(g):
                logits.accumulate_grad(g * grad.astype(logits.data.dtype))
            tape._record(out, (logits,), backward)
        return out
    loss, grad, _, _ = transducer_forward_backward(logits, y)
    return loss, grad


def transducer_loss_via_ops(logits, y):
    """Same recursion assembled from tape primitives (autodiff cross-check).

    Only for small verification instances; builds one graph node per cell.
    """
    T, up1, _ = logits.shape
    U = up1 - 1
    y = [int(v) for v in y]
    alpha = [[None] * (U + 1) for _ in range(T)]
    alpha[0][0] = tt.Tensor(0.0)
    for u in range(1, U + 1):
        alpha[0][u] = alpha[0][u - 1] + logits[0, u - 1, y[u - 1]]
    for t in range(1, T):
        for u in range(U + 1):
            frm_time = alpha[t - 1][u] + logits[t - 1, u, 0]
            if u == 0:
                alpha[t][u] = frm_time
            else:
                frm_label = alpha[t][u - 1] + logits[t, u - 1, y[u - 1]]
                alpha[t][u] = tt.logsumexp(tt.stack([frm_time, frm_label]))
    return tt.scale(alpha[T - 1][U] + logits[T - 1, U, 0], -1.0)


def brute_force_transducer_loss(logp, y, max_total=12):
    """Explicit enumeration of every monotone blank/label path."""
    logp = np.asarray(logp)
    T, up1, _ = logp.shape
    U = up1 - 1
    y = [int(v) for v in y]
    if T + U > max_total:
        raise NumericsError(f"brute force limited to T+U <= {max_total}")
    path_scores = []
    for label_slots in combinations(range(T + U), U):
        seq = [0] * (T + U)  # 0 = blank, 1 = label
        for i in label_slots:
            seq[i] = 1
        t = u = 0
        score = 0.0
        ok = True
        for m in seq:
            if m == 0:
                score += logp[t, u, 0]
                t += 1
            else:
                if t >= T:
                    ok = False
                    break
                score += logp[t, u, y[u]]
                u += 1
        if ok and t == T and u == U:
            path_scores.append(score)
    if not path_scores:
        return np.inf
    m = max(path_scores)
    return float(-(m + np.log(sum(np.exp(s - m) for s in path_scores))))


# ---------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------

def _extended_labels(y):
    ext = [0]
    for v in y:
        ext.append(int(v))
        ext.append(0)
    return ext


def ctc_forward_backward(logp, y):
    """CTC alpha/beta over the 2U+1 extended label sequence, blank at 0.

    Returns (loss, grad, feasible). An infeasible alignment (T too short
    for the required separating blanks) yields +inf loss and zero grad.
    """
    logp = np.asarray(logp)
    if logp.ndim != 2:
        raise ShapeError("ctc_loss", logp.shape)
    T, vext = logp.shape
    y = [int(v) for v in y]
    if any(v < 1 or v >= vext for v in y):
        raise NumericsError("ctc_loss: target out of [1, V]")
    if not np.isfinite(logp).all():
        raise NumericsError("ctc_loss: non-finite log-probs")
    ext = _extended_labels(y)
    S = len(ext)
    U = len(y)

    skip_ok = np.zeros(S, dtype=bool)  # may arrive from s-2
    for s in range(2, S):
        skip_ok[s] = ext[s] != 0 and ext[s] != ext[s - 2]

    alpha = np.full((T, S), NEG_INF, dtype=logp.dtype)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        cur = prev.copy()
        cur[1:] = np.logaddexp(cur[1:], prev[:-1])
        skip = np.where(skip_ok[2:], prev[:-2], NEG_INF)
        cur[2:] = np.logaddexp(cur[2:], skip)
        alpha[t] = cur + logp[t, ext]

    tails = [alpha[T - 1, S - 1]]
    if S > 1:
        tails.append(alpha[T - 1, S - 2])
    log_z = np.logaddexp.reduce(np.array(tails))
    if not np.isfinite(log_z):
        return np.inf, np.zeros_like(logp), False

    beta = np.full((T, S), NEG_INF, dtype=logp.dtype)
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        cur = nxt.copy()
        cur[:-1] = np.logaddexp(cur[:-1], nxt[1:])
        skip = np.where(skip_ok[2:], nxt[2:], NEG_INF)
        cur[:-2] = np.logaddexp(cur[:-2], skip)
        beta[t] = cur + logp[t, ext]

    # occupancy gamma(t, s) = alpha * beta / p(t, ext[s]) / Z
    occ = alpha + beta - logp[:, ext] - log_z
    grad = np.zeros_like(logp)
    np.add.at(grad, (np.repeat(np.arange(T), S), np.tile(ext, T)), -np.exp(occ).reshape(-1))
    return float(-log_z), grad, True


def ctc_loss(logprobs, y):
    """CTC loss as a tape operation; returns (loss tensor | float pair, feasible)."""
    if isinstance(logprobs, tt.Tensor):
        loss, grad, feasible = ctc_forward_backward(logprobs.data, y)
        out = tt.Tensor.__new__(tt.Tensor)
        out.data = np.asarray(loss, dtype=logprobs.data.dtype)
        out.grad = None
        tape = tt.active_tape()
        needs = tape is not None and logprobs.requires_grad
        out.requires_grad = needs
        if needs:
            def backward(g):
                logprobs.accumulate_grad(g * grad.astype(logprobs.data.dtype))
            tape._record(out, (logprobs,), backward)
        return out, feasible
    loss, grad, feasible = ctc_forward_backward(logprobs, y)
    return (loss, grad), feasible


def collapse_ctc(frames):
    """Remove repeats, then blanks."""
    out = []
    prev = None
    for f in frames:
        if f != prev:
            if f != 0:
                out.append(f)
            prev = f
    return out


def brute_force_ctc_loss(logp, y, max_frames=6):
    """Sum over every frame labeling that collapses to the target."""
    logp = np.asarray(logp)
    T, vext = logp.shape
    if T > max_frames:
        raise NumericsError(f"brute force limited to T <= {max_frames}")
    y = [int(v) for v in y]
    scores = []
    for frames in product(range(vext), repeat=T):
        if collapse_ctc(frames) == y:
            scores.append(sum(logp[t, f] for t, f in enumerate(frames)))
    if not scores:
        return np.inf
    m = max(scores)
    return float(-(m + np.log(sum(np.exp(s - m) for s in scores))))


# ---------------------------------------------------------------------
# LM cross-entropy
# ---------------------------------------------------------------------

def lm_loss(logprobs, targets):
    """Mean negative log-likelihood of target ids under per-position log-dists.

    ``logprobs``: Tensor or array of shape N x W (already log-normalized,
    one row per predicted position, start-shifted so row i predicts
    target i; the final row predicts the end-of-utterance id).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if isinstance(logprobs, tt.Tensor):
        if logprobs.ndim != 2 or targets.shape != (logprobs.shape[0],):
            raise ShapeError("lm_loss", logprobs.shape, targets.shape)
        picked = tt.gather_rows(logprobs, targets)
        return tt.scale(tt.mean(picked), -1.0)
    logprobs = np.asarray(logprobs)
    if logprobs.ndim != 2 or targets.shape != (logprobs.shape[0],):
        raise ShapeError("lm_loss", logprobs.shape, targets.shape)
    return float(-logprobs[np.arange(len(targets)), targets].mean())


def perplexity(logprobs, targets):
    return float(np.exp(lm_loss(np.asarray(logprobs), targets)))
