"""Random item masking: build masked training views of padded sequences.

The number of masked positions is computed from the count of real (non-pad)
items, never from the padded length, and is always at least one. Pad
positions are never masked. Autoregressive training does not use this
module at all; its targets are the next items at every non-pad position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class MaskedView:
    view_index: int  # 1-based
    ids: np.ndarray  # padded sequence with mask substitutions, length T
    masked_indices: list  # sorted positions that were replaced
    originals: list  # ground-truth ids at those positions

    def restore(self) -> np.ndarray:
        out = self.ids.copy()
        out[self.masked_indices] = self.originals
        return out


def mask_count(n_items: int, rho: float) -> int:
    return max(1, math.ceil(rho * n_items))


def mask_sequence(seq, rho: float, rng, mask_id: int, pad_id: int,
                  view_index: int = 1) -> MaskedView:
    """Replace ceil(rho * #non-pad) distinct non-pad positions with the mask id."""
    ids = np.asarray(seq).copy()
    nonpad = np.flatnonzero(ids != pad_id)
    if nonpad.size == 0:
        raise ContractError("cannot mask a sequence with no items")
    n_mask = mask_count(nonpad.size, rho)
    chosen = np.sort(rng.choice(nonpad, size=n_mask, replace=False))
    originals = ids[chosen].tolist()
    ids[chosen] = mask_id
    return MaskedView(view_index, ids, chosen.tolist(), originals)


def make_views(seq, n_views: int, rho: float, rng, mask_id: int, pad_id: int):
    """Draw n_views masked views from independent substreams of ``rng``."""
    if n_views < 1:
        raise ContractError(f"need at least one view, got {n_views}")
    streams = rng.spawn(n_views)
    return [
        mask_sequence(seq, rho, stream, mask_id, pad_id, view_index=m + 1)
        for m, stream in enumerate(streams)
    ]
