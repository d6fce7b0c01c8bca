"""Pure numpy/Python versions of the compiled kernels.

Same signatures and results as ``_core``; used when the extension is not
built or when ``PERCEPTUAL_SE_PURE=1`` is set.
"""
import numpy as np

NEG_INF = -np.inf


class CTCLengthError(ValueError):
    """Target sequence needs more frames than the input provides."""


def _lse(a, b):
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = m + np.log(np.exp(a - m) + np.exp(b - m))
    return np.where(np.isneginf(m), NEG_INF, out)


def ctc_required_frames(target):
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_forward_backward(log_probs, target, blank=0):
    """Return (-log p(target), d(-log p)/d log_probs) for one sequence.

    log_probs: (T, N) float64; target: int64 labels without blanks.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    t_len, n_sym = lp.shape
    need = ctc_required_frames(target)
    if t_len < max(need, 1):
        raise CTCLengthError(f"target of length {len(target)} needs {max(need, 1)} frames, got {t_len}")
    s_len = 2 * len(target) + 1
    ext = np.full(s_len, blank, dtype=np.int64)
    ext[1::2] = target
    # skip transition s-2 -> s allowed for labels differing from the label two back
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = lp[:, ext]
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse(acc[1:], prev[:-1])
        two = np.full(s_len, NEG_INF)
        two[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        acc = _lse(acc, two)
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse(acc[:-1], nxt[1:])
        two = np.full(s_len, NEG_INF)
        two[:-2] = np.where(skip[2:], nxt[2:], NEG_INF)
        beta[t] = _lse(acc, two)

    log_p = alpha[-1, -1] if s_len == 1 else _lse(alpha[-1, -1], alpha[-1, -2])
    grad = np.zeros((t_len, n_sym))
    if np.isneginf(log_p):
        return float("inf"), grad
    occ = np.exp(alpha + beta - log_p)
    for s in range(s_len):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def edit_alignment(hyp, ref):
    """Levenshtein distance and, for each hyp token, its aligned ref index (-1 = insertion).

    Unit costs; backtrace prefers the diagonal (match/substitution), then
    deletion, then insertion.
    """
    hyp = list(hyp)
    ref = list(ref)
    nh, nr = len(hyp), len(ref)
    d = [[0] * (nr + 1) for _ in range(nh + 1)]
    for i in range(nh + 1):
        d[i][0] = i
    for j in range(nr + 1):
        d[0][j] = j
    for i in range(1, nh + 1):
        row, up = d[i], d[i - 1]
        hi = hyp[i - 1]
        for j in range(1, nr + 1):
            sub = up[j - 1] + (hi != ref[j - 1])
            best = up[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            if sub < best:
                best = sub
            row[j] = best
    link = np.full(nh, -1, dtype=np.int64)
    i, j = nh, nr
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            link[i - 1] = j - 1
            i -= 1
            j -= 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            j -= 1
        else:
            i -= 1
    return d[nh][nr], link
