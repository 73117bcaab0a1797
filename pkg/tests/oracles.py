"""Straight-line numpy reference implementations used as test oracles.

Everything here works one point row at a time with plain numpy, sharing no
code with the package, so agreement is meaningful.
"""

import itertools

import numpy as np


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _relu(v):
    return np.maximum(v, 0.0)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def affine(mlp):
    return mlp.W.data, mlp.b.data


def attentive_pool_ref(F, W, b):
    F_ap = np.empty((F.shape[0], W.shape[1]))
    f_prime = np.empty((F.shape[0], 1))
    for i, row in enumerate(F):
        a = _relu(row @ W + b)
        F_ap[i] = a
        f_prime[i, 0] = np.sum(a * _softmax(a))
    return F_ap, f_prime


def channel_enhance_ref(F, F_ap, f_prime, W_ce, b_ce, W_fc, b_fc):
    out = np.empty_like(F)
    for i in range(F.shape[0]):
        cat = np.concatenate([F[i], f_prime[i], F_ap[i]])
        ce = _relu(cat @ W_ce + b_ce)
        f_ceat = np.sum(ce * _softmax(ce))
        gate = _sigmoid(f_ceat * W_fc[0] + b_fc)
        out[i] = F[i] * gate + F[i]
    return out


def connection_block_ref(F_c, F_ph, msg_c, msg_ph, p):
    """Messenger exchange between the two streams, one messenger at a time."""
    m1, m2, m3 = affine(p.m1), affine(p.m2), affine(p.m3)
    out_c, out_ph = F_c.copy(), F_ph.copy()
    branches = ((p.central, out_c, msg_c), (p.peripheral, out_ph, msg_ph))
    for j in range(len(msg_c)):
        fm = np.concatenate([F_c[msg_c[j]], F_ph[msg_ph[j]]])
        r = _relu(fm @ m1[0] + m1[1])
        fl = _relu(r @ m2[0] + m2[1]) @ m3[0] + m3[1]
        for br, out, msg in branches:
            F_ap, f_prime = attentive_pool_ref(fl[None], *affine(br.W_a))
            enh = channel_enhance_ref(fl[None], F_ap, f_prime, *affine(br.W_ce), *affine(br.W_fc))
            out[msg[j]] = enh[0] + r
    return out_c, out_ph


def jaccard_set_loss(errors_mask, fg_mask):
    """1 - |fg ∩ correct| / |fg ∪ errors| for boolean masks; 0 for empty union."""
    inter = np.sum(fg_mask & ~errors_mask)
    union = np.sum(fg_mask | errors_mask)
    return 0.0 if union == 0 else 1.0 - inter / union


def lovasz_extension_ref(errors, fg):
    """Lovász extension of the Jaccard set loss evaluated over sorted prefix sets.

    f(e) = sum_i e_(i) * [J(S_i) - J(S_{i-1})], where S_i holds the i largest
    errors; each J is evaluated directly on the prefix set.
    """
    order = sorted(range(len(errors)), key=lambda i: (-errors[i], i))
    total, prev = 0.0, 0.0
    mask = np.zeros(len(errors), dtype=bool)
    for i in order:
        mask[i] = True
        cur = jaccard_set_loss(mask, fg)
        total += errors[i] * (cur - prev)
        prev = cur
    return total


def lovasz_softmax_ref(probs, labels):
    n, C = probs.shape
    losses = []
    for c in range(C):
        fg = labels == c
        if not fg.any():
            continue
        errors = np.where(fg, 1.0 - probs[:, c], probs[:, c])
        losses.append(lovasz_extension_ref(errors, fg))
    return float(np.mean(losses)) if losses else 0.0


def brute_confusion_iou(cm):
    """Per-class IoU by enumerating (true, predicted) pairs cell by cell."""
    C = len(cm)
    iou = np.full(C, np.nan)
    for c in range(C):
        tp = fp = fn = 0
        for t, q in itertools.product(range(C), range(C)):
            if t == c and q == c:
                tp += cm[t][q]
            elif q == c:
                fp += cm[t][q]
            elif t == c:
                fn += cm[t][q]
        if tp + fp + fn:
            iou[c] = tp / (tp + fp + fn)
    return iou


def adam_scalar_ref(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace
