"""Independent numpy reference implementations used as test oracles.

Everything here is plain-loop or plain-vectorized numpy with no dependence
on the tape engine, so agreement with the package code is meaningful.
"""

import numpy as np

CLAMP = 1e-12


def softmax_ref(logits, tau=1.0):
    z = np.asarray(logits, dtype=float) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_ref(logits, target):
    """Scalar -log softmax probability of the target index."""
    p = softmax_ref(logits)
    return float(-np.log(max(p[target], CLAMP)))


def bce_ref(probs, y):
    p = np.clip(np.asarray(probs, dtype=float), CLAMP, None)
    one_minus = np.clip(1.0 - np.asarray(probs, dtype=float), CLAMP, None)
    y = np.asarray(y, dtype=float)
    return float(-(y * np.log(p) + (1 - y) * np.log(one_minus)).sum())


def seq_rep_ref(h, nonpad, pooling="flatten"):
    """Unnormalized whole-sequence representation per user."""
    h = np.asarray(h, dtype=float)
    m = np.asarray(nonpad, dtype=float)[..., None]
    hm = h * m
    if pooling == "flatten":
        return hm.reshape(h.shape[0], -1)
    counts = np.asarray(nonpad).sum(axis=1, keepdims=True)
    return hm.sum(axis=1) / counts


def cos_ref(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def contrastive_pair_ref(anchor_x, views_y, anchors_y, tau, include_positive=False):
    """Double loop over users and views for one (anchor net, view net) pair."""
    b = anchor_x.shape[0]
    total = 0.0
    for u in range(b):
        denom = sum(
            np.exp(cos_ref(anchor_x[u], anchors_y[k]) / tau)
            for k in range(b) if k != u
        )
        for view in views_y:
            pos = np.exp(cos_ref(anchor_x[u], view[u]) / tau)
            total += -np.log(pos / (denom + (pos if include_positive else 0.0)))
    return total


def icl_ref(anchors, views, nonpad, tau, pooling="flatten", include_positive=False):
    total = 0.0
    for a, vs in zip(anchors, views):
        ar = seq_rep_ref(a, nonpad, pooling)
        vr = [seq_rep_ref(v, nonpad, pooling) for v in vs]
        total += contrastive_pair_ref(ar, vr, ar, tau, include_positive)
    return total


def ccl_ref(anchors, views, nonpad, tau, pooling="flatten", include_positive=False):
    n = len(anchors)
    reps = [seq_rep_ref(a, nonpad, pooling) for a in anchors]
    vreps = [[seq_rep_ref(v, nonpad, pooling) for v in vs] for vs in views]
    total = 0.0
    for x in range(n):
        for y in range(n):
            if x != y:
                total += contrastive_pair_ref(reps[x], vreps[y], reps[y], tau,
                                              include_positive)
    return total


def kl_ref(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float((p * (np.log(np.maximum(p, CLAMP)) - np.log(np.maximum(q, CLAMP)))).sum())


def kd_ref(logits_per_network, tau, pairs=None):
    n = len(logits_per_network)
    if pairs is None:
        pairs = [(x, y) for x in range(n) for y in range(n) if x != y]
    total = 0.0
    for x, y in pairs:
        for lt, ls_ in zip(logits_per_network[x], logits_per_network[y]):
            zt = softmax_ref(lt, tau)
            zs = softmax_ref(ls_, tau)
            for row_t, row_s in zip(np.atleast_2d(zt), np.atleast_2d(zs)):
                total += kl_ref(row_t, row_s)
    return total


def rank_ref(scores, target):
    """Full-sort rank with (score desc, id asc) ordering."""
    scores = np.asarray(scores)
    order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
    return order.index(target) + 1
