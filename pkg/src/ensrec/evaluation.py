"""Ensemble inference and unsampled full-ranking metrics.

Scores are averaged network logits at the final position of a left-padded
input. Every ranked list covers the whole item set; nothing is sampled and,
by default, previously seen items are not excluded. Score ties break toward
the smaller item id so runs are comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .data import SplitDataset, pad_sequence
from .errors import ContractError

CUTOFFS = (5, 10)


def prepare_inference_seq(train_items, max_len: int, mask_id: int, pad_id: int) -> np.ndarray:
    """History plus a trailing mask token, left-padded to ``max_len``.

    A full-length history loses its earliest items to make room for the mask.
    """
    items = list(train_items)
    if not items:
        raise ContractError("cannot build an inference sequence from an empty history")
    return pad_sequence(items[-(max_len - 1):] + [mask_id], max_len, pad_id)


def prepare_next_item_seq(train_items, max_len: int, pad_id: int) -> np.ndarray:
    """Autoregressive variant: plain left-padded history, no mask token."""
    items = list(train_items)
    if not items:
        raise ContractError("cannot build an inference sequence from an empty history")
    return pad_sequence(items, max_len, pad_id)


def ensemble_predict(ensemble: enc.Ensemble, seqs) -> np.ndarray:
    """Average the member networks' item logits at the final position.

    ``seqs`` is [B, T] prepared by the inference helpers; dropout is off and
    no tape is recorded. Returns plain [B, vocab] scores.
    """
    seqs = np.atleast_2d(np.asarray(seqs))
    cfg = ensemble.config
    attn_mask = enc.attention_mask(seqs, cfg)
    with ad.no_grad():
        acc = None
        for net in ensemble.networks:
            h = enc.encode(net, seqs, cfg, training=False, attn_mask=attn_mask)
            logits = enc.item_logits(net, ad.Tensor(h.data[:, -1, :])).data
            acc = logits.copy() if acc is None else acc + logits
    return acc / len(ensemble.networks)


def rank_of(scores, target: int) -> int:
    """1-based full-ranking position of ``target``; ties go to smaller ids."""
    scores = np.asarray(scores)
    s = scores[target]
    greater = int((scores > s).sum())
    tied_before = int(((scores == s) & (np.arange(scores.size) < target)).sum())
    return 1 + greater + tied_before


def _ranks_batch(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    s = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    greater = (scores > s).sum(axis=1)
    tied_before = ((scores == s) & (ids < targets[:, None])).sum(axis=1)
    return 1 + greater + tied_before


def metrics(ranks, k: int):
    """(HR@k, NDCG@k) means over per-user ranks."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ContractError("no ranks to aggregate")
    hit = ranks <= k
    hr = float(hit.mean())
    gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hr, float(gains.mean())


@dataclass
class EvalReport:
    n_users: int
    hr: dict  # cutoff -> mean hit ratio
    ndcg: dict  # cutoff -> mean NDCG
    ranks: list  # per-user 1-based ranks, dense user order

    def as_dict(self, include_ranks: bool = False) -> dict:
        out = {
            "n_users": self.n_users,
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
        }
        if include_ranks:
            out["ranks"] = self.ranks
        return out

    def table(self) -> str:
        cols = sorted(self.hr)
        lines = [f"users evaluated: {self.n_users}"]
        for k in cols:
            lines.append(f"HR@{k}:   {self.hr[k]:.4f}")
            lines.append(f"NDCG@{k}: {self.ndcg[k]:.4f}")
        return "\n".join(lines)


def evaluate(ensemble: enc.Ensemble, split: SplitDataset, target: str = "test",
             exclude_seen: bool = False, batch_size: int = 256,
             cutoffs=CUTOFFS) -> EvalReport:
    """Full-ranking leave-one-out evaluation on the validation or test target."""
    if target not in ("val", "test"):
        raise ContractError(f"target must be 'val' or 'test', got {target!r}")
    cfg = ensemble.config
    histories, targets = [], []
    for u in split.users:
        history = u.train if target == "val" else u.train + [u.val]
        histories.append(history)
        targets.append(u.val if target == "val" else u.test)
    ranks = np.empty(len(histories), dtype=np.int64)
    for lo in range(0, len(histories), batch_size):
        chunk = histories[lo:lo + batch_size]
        if cfg.mode == enc.MODE_AUTOREGRESSIVE:
            seqs = np.stack([prepare_next_item_seq(h, cfg.max_len, cfg.pad_id) for h in chunk])
        else:
            seqs = np.stack([
                prepare_inference_seq(h, cfg.max_len, cfg.mask_id, cfg.pad_id) for h in chunk
            ])
        scores = ensemble_predict(ensemble, seqs)
        if exclude_seen:
            for row, history in enumerate(chunk):
                scores[row, list(set(history))] = -math.inf
        ranks[lo:lo + len(chunk)] = _ranks_batch(
            scores, np.asarray(targets[lo:lo + len(chunk)])
        )
    hr, ndcg = {}, {}
    for k in cutoffs:
        hr[k], ndcg[k] = metrics(ranks, k)
    return EvalReport(len(histories), hr, ndcg, ranks.tolist())


def chance_ndcg(n_items: int, k: int) -> float:
    """Expected NDCG@k when the target's rank is uniform over the item set."""
    return sum(1.0 / math.log2(r + 1) for r in range(1, k + 1)) / n_items
