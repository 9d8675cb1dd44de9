"""The five training objectives and their weighted combination.

All losses are sums (over networks, views, batch users, and positions), not
means, and operate on tape tensors so one backward pass serves the whole
objective. Contrastive terms follow the written form exactly: the
denominator contains only the in-batch negatives, so those losses can go
negative. ``include_positive_in_denominator`` switches to the conventional
form where the positive pair joins the denominator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError

logger = logging.getLogger("ensrec.losses")


@dataclass
class LossReport:
    mip: float
    ap: float
    icl: float
    ccl: float
    kd: float
    total: float

    def as_dict(self) -> dict:
        return {
            "mip": self.mip, "ap": self.ap, "icl": self.icl,
            "ccl": self.ccl, "kd": self.kd, "total": self.total,
        }

    def decomposition_error(self, lam: float, mu: float) -> float:
        recombined = self.mip + self.ap + lam * (self.icl + self.ccl) + mu * self.kd
        return abs(self.total - recombined)


# ---------------------------------------------------------------------------
# item and attribute prediction


def mip_loss(logits_per_network, targets_per_view) -> Tensor:
    """Cross-entropy at the replaced positions, summed over networks, views,
    positions, and batch users.

    ``logits_per_network[n][m]`` holds the [rows, vocab] logits of network n
    at the masked positions of view m; ``targets_per_view[m]`` the matching
    ground-truth item ids. Targets are shared across networks because every
    network reads the same masked views.
    """
    total_rows = sum(int(np.asarray(t).size) for t in targets_per_view)
    if total_rows == 0:
        raise ContractError("masked-item loss needs at least one masked position")
    total = None
    for per_view in logits_per_network:
        for logits, targets in zip(per_view, targets_per_view):
            targets = np.asarray(targets)
            rows, vocab = logits.shape
            if targets.size and (targets.min() < 0 or targets.max() >= vocab):
                raise ContractError("masked-item target outside item vocabulary")
            lp = ad.log_softmax(logits)
            flat_idx = np.arange(rows) * vocab + targets
            picked = ad.gather_rows(ad.reshape(lp, (-1,)), flat_idx)
            term = ad.neg(ad.tsum(picked))
            total = term if total is None else ad.add(total, term)
    return total


def ap_loss(probs_per_network, targets) -> Tensor:
    """Multi-label binary cross-entropy over all real positions of the
    original sequences, summed over networks.

    ``probs_per_network[n]`` is [rows, attrs] sigmoid output; ``targets`` is
    the shared multi-hot array of the same shape.
    """
    y = np.asarray(targets, dtype=float)
    total = None
    for probs in probs_per_network:
        if probs.shape != y.shape:
            raise ContractError(
                f"attribute probs shape {probs.shape} != targets shape {y.shape}"
            )
        yt = Tensor(y)
        pos = ad.mul(yt, ad.tlog(probs))
        neg = ad.mul(Tensor(1.0 - y), ad.tlog(ad.add_scalar(ad.neg(probs), 1.0)))
        term = ad.neg(ad.tsum(ad.add(pos, neg)))
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# contrastive representation alignment


def sequence_reps(h: Tensor, nonpad, pooling: str = "flatten") -> Tensor:
    """L2-normalized whole-sequence representation [B, D] from hidden states
    [B, T, d]. Pad rows are zeroed first so they are inert; 'flatten' keeps
    per-position detail, 'mean' pools over real positions."""
    nonpad = np.asarray(nonpad, dtype=bool)
    b, t, d = h.shape
    hm = ad.mul(h, Tensor(nonpad[..., None].astype(float)))
    if pooling == "flatten":
        rep = ad.reshape(hm, (b, t * d))
    elif pooling == "mean":
        counts = nonpad.sum(axis=1, keepdims=True).astype(float)
        rep = ad.mul(ad.tsum(hm, axis=1), Tensor(1.0 / counts))
    else:
        raise ParameterError(f"unknown pooling {pooling!r}")
    sq = ad.tsum(ad.mul(rep, rep), axis=-1, keepdims=True)
    return ad.div(rep, ad.tsqrt(ad.add_scalar(sq, 1e-12)))


def _pair_term(anchor_x: Tensor, views_y, anchors_y: Tensor, tau: float,
               include_positive: bool) -> Tensor:
    """One anchor-network / view-network contrastive term, summed over the
    batch and all views. Inputs are normalized [B, D] representations."""
    b = anchor_x.shape[0]
    if b < 2:
        raise ContractError("contrastive loss needs batch size >= 2 for negatives")
    sims = ad.matmul(anchor_x, ad.swapaxes(anchors_y, 0, 1))
    exp_neg = ad.mul(ad.texp(ad.scale(sims, 1.0 / tau)), Tensor(1.0 - np.eye(b)))
    denom = ad.tsum(exp_neg, axis=1)
    total = None
    for view in views_y:
        pos = ad.tsum(ad.mul(anchor_x, view), axis=-1)
        if include_positive:
            log_denom = ad.tlog(ad.add(denom, ad.texp(ad.scale(pos, 1.0 / tau))))
        else:
            log_denom = ad.tlog(denom)
        term = ad.tsum(ad.sub(log_denom, ad.scale(pos, 1.0 / tau)))
        total = term if total is None else ad.add(total, term)
    return total


def _normalized(anchors, views, nonpad, pooling):
    anchor_reps = [sequence_reps(a, nonpad, pooling) for a in anchors]
    view_reps = [[sequence_reps(v, nonpad, pooling) for v in per_net] for per_net in views]
    return anchor_reps, view_reps


def icl_loss(anchors, views, nonpad, tau: float, pooling: str = "flatten",
             include_positive: bool = False) -> Tensor:
    """Within-network alignment: each network's masked views against its own
    original-sequence anchor, other users' anchors as negatives."""
    anchor_reps, view_reps = _normalized(anchors, views, nonpad, pooling)
    return icl_from_reps(anchor_reps, view_reps, tau, include_positive)


def icl_from_reps(anchor_reps, view_reps, tau, include_positive=False) -> Tensor:
    total = None
    for a, vs in zip(anchor_reps, view_reps):
        term = _pair_term(a, vs, a, tau, include_positive)
        total = term if total is None else ad.add(total, term)
    return total


def ccl_loss(anchors, views, nonpad, tau: float, pooling: str = "flatten",
             include_positive: bool = False) -> Tensor:
    """Cross-network alignment over all ordered network pairs (x, y), x != y:
    network x's anchor against network y's views, with network y's other-user
    anchors as negatives. With a single network there are no pairs."""
    if len(anchors) < 2:
        logger.info("cross-network contrastive loss skipped: fewer than 2 networks")
        return Tensor(0.0)
    anchor_reps, view_reps = _normalized(anchors, views, nonpad, pooling)
    return ccl_from_reps(anchor_reps, view_reps, tau, include_positive)


def ccl_from_reps(anchor_reps, view_reps, tau, include_positive=False) -> Tensor:
    total = None
    n = len(anchor_reps)
    for x in range(n):
        for y in range(n):
            if x == y:
                continue
            term = _pair_term(anchor_reps[x], view_reps[y], anchor_reps[y], tau,
                              include_positive)
            total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# logits-level mutual distillation


def kd_loss(logits_per_network, tau: float, pairs=None) -> Tensor:
    """Tempered KL divergence between every ordered pair of networks at the
    masked positions, teacher side gradient-stopped.

    ``pairs`` restricts the ordered (teacher, student) pairs; by default all
    N(N-1) permutations contribute, so each network teaches and learns.
    """
    n = len(logits_per_network)
    if n < 2:
        logger.info("distillation loss skipped: fewer than 2 networks")
        return Tensor(0.0)
    if pairs is None:
        pairs = [(x, y) for x in range(n) for y in range(n) if x != y]
    total = None
    for x, y in pairs:
        for logits_t, logits_s in zip(logits_per_network[x], logits_per_network[y]):
            if logits_t.shape != logits_s.shape:
                raise ContractError(
                    "teacher and student logits must cover identical masked positions"
                )
            z_t = ad.softmax_with_temperature(logits_t.detach(), tau)
            log_zt = ad.tlog(z_t)
            log_zs = ad.log_softmax(logits_s, tau)
            term = ad.tsum(ad.mul(z_t, ad.sub(log_zt, log_zs)))
            total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# combination


def total_loss(mip, ap, icl, ccl, kd, lam: float, mu: float):
    """Weighted sum of the five objectives.

    Disabled components may be passed as None (reported as 0). Returns the
    scalar tape tensor to differentiate plus the matching LossReport.
    """
    if lam < 0 or mu < 0:
        raise ParameterError(f"loss weights must be nonnegative, got lam={lam}, mu={mu}")

    def val(t):
        return 0.0 if t is None else t.item()

    total = None

    def acc(total_t, term, weight):
        if term is None or weight == 0.0:
            return total_t
        weighted = ad.scale(term, weight) if weight != 1.0 else term
        return weighted if total_t is None else ad.add(total_t, weighted)

    total = acc(total, mip, 1.0)
    total = acc(total, ap, 1.0)
    total = acc(total, icl, lam)
    total = acc(total, ccl, lam)
    total = acc(total, kd, mu)
    if total is None:
        total = Tensor(0.0)
    report = LossReport(
        mip=val(mip), ap=val(ap), icl=val(icl), ccl=val(ccl), kd=val(kd),
        total=total.item(),
    )
    return total, report
