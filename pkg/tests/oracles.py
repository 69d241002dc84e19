"""Independent oracles shared by the unit and acceptance suites.

Everything here is deliberately written the slow, obvious way (explicit loops,
explicit character sets, exhaustive enumeration) and never calls into the
package code paths it is used to check.
"""

import itertools
import math

import numpy as np


def matmul_loops(a, b):
    """Triple-loop matrix product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_row_direct(row):
    """Softmax of one row by direct exponentiation."""
    exps = [math.exp(v) for v in row]
    z = sum(exps)
    return [e / z for e in exps]


def central_difference_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    """max |a-n| / max(|a|, |n|, floor); floor keeps near-zero entries honest."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def attention_loops(q, k, v, bias=None, pad_mask=None):
    """Scalar-arithmetic attention: softmax(Q (K+b)^T / sqrt(d_k)) V."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n, d_k = q.shape
    kb = k.copy()
    if bias is not None:
        for i in range(kb.shape[0]):
            for j in range(d_k):
                kb[i, j] += bias[j]
    scores = np.zeros((n, kb.shape[0]))
    for i in range(n):
        for j in range(kb.shape[0]):
            s = 0.0
            for t in range(d_k):
                s += q[i, t] * kb[j, t]
            scores[i, j] = s / math.sqrt(d_k)
            if pad_mask is not None and pad_mask[j]:
                scores[i, j] = -1e30
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        w = softmax_row_direct(scores[i])
        for j in range(v.shape[1]):
            out[i, j] = sum(w[t] * v[t, j] for t in range(v.shape[0]))
    return out


def multi_head_loops(x, heads, w_out, pad_mask=None):
    """Loop-built multi-head attention.

    heads: list of (w_q, w_k, w_v, bias-or-None) per head; output is the
    concatenated heads projected by w_out.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = []
    for (w_q, w_k, w_v, bias) in heads:
        q = matmul_loops(x, w_q)
        k = matmul_loops(x, w_k)
        v = matmul_loops(x, w_v)
        parts.append(attention_loops(q, k, v, bias=bias, pad_mask=pad_mask))
    concat = np.concatenate(parts, axis=1)
    return matmul_loops(concat, w_out)


def bce_naive(x, y):
    """Direct-form binary cross-entropy -(y log s + (1-y) log(1-s)), s = sigmoid(x).

    Evaluated at 50 decimal digits: in float64 the 1-sigmoid(x) subtraction
    cancels catastrophically near |x| = 20, which would charge the oracle's
    own rounding against the implementation.
    """
    import mpmath
    with mpmath.workdps(50):
        s = 1 / (1 + mpmath.e ** (-mpmath.mpf(x)))
        y = mpmath.mpf(y)
        return float(-(y * mpmath.log(s) + (1 - y) * mpmath.log(1 - s)))


def mlm_loss_direct(logits, targets):
    """Mean -log softmax(logits)[pos, tok] via explicit log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    vals = []
    for pos, tok in targets:
        row = logits[pos]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        vals.append(lse - row[tok])
    return sum(vals) / len(vals)


def char_set(spans):
    """Explicit character index set of a span list."""
    chars = set()
    for start, end in spans:
        chars.update(range(start, end))
    return chars


def micro_f1_char_sets(pairs):
    """Pooled char-set precision/recall/F1 over (gold, pred) span-list pairs.

    Returns (tp, n_pred, n_gold, precision, recall, f1) with the same
    zero-denominator conventions the evaluator documents.
    """
    tp = n_pred = n_gold = 0
    for gold, pred in pairs:
        g = char_set(gold)
        p = char_set(pred)
        tp += len(g & p)
        n_pred += len(p)
        n_gold += len(g)
    if n_pred == 0 and n_gold == 0:
        return tp, n_pred, n_gold, 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return tp, n_pred, n_gold, precision, recall, f1


def padding_tokens_by_counting(lengths, batches):
    """Count padding slots one token at a time."""
    count = 0
    for batch in batches:
        longest = max(lengths[i] for i in batch)
        for i in batch:
            for _pos in range(lengths[i], longest):
                count += 1
    return count


def _set_partitions(items):
    """All partitions of a list into nonempty blocks."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [part[i] + [first]] + part[i + 1:]
        yield [[first]] + part


def exhaustive_min_padding(lengths, token_budget=None):
    """Minimum total padding over every partition (optionally area-capped).

    The cap matches the dynamic planner's feasibility rule: a batch of k
    sequences padded to its own max length m occupies k*m token slots, which
    must not exceed the budget.
    """
    indices = list(range(len(lengths)))
    best = None
    for part in _set_partitions(indices):
        ok = True
        pad = 0
        for block in part:
            m = max(lengths[i] for i in block)
            if token_budget is not None and len(block) * m > token_budget:
                ok = False
                break
            pad += sum(m - lengths[i] for i in block)
        if ok and (best is None or pad < best):
            best = pad
    return best
