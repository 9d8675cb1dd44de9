"""Dataset ingestion, preprocessing, synthetic corpus generation, batching.

Raw interactions are (user, item, timestamp) triples; an optional sidecar
maps items to attribute sets. Preprocessing removes duplicate user/item
pairs (keeping the earliest), sorts by timestamp with raw-item-id
tie-breaks, applies iterated 5-core filtering to a fixpoint, and re-indexes
everything densely. All raw ids are handled as strings; numeric ids sort
numerically for determinism.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import MODE_AUTOREGRESSIVE, ModelConfig
from .errors import ContractError, DatasetError, ParameterError, VocabularyError
from .masking import make_views

DATASET_FORMAT_VERSION = 1
MIN_CORE = 5


def _raw_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


# ---------------------------------------------------------------------------
# ingestion


def ingest_tsv(path) -> list:
    """Parse `user <TAB> item <TAB> timestamp` rows; malformed rows fail with
    their line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            user, item, ts = fields
            if not user or not item:
                raise DatasetError(f"{path}:{lineno}: empty user or item id")
            try:
                ts_int = int(ts)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer timestamp {ts!r}") from None
            records.append((user, item, ts_int))
    return records


def ingest_attrs_tsv(path) -> dict:
    """Parse `item <TAB> attr[,attr...]` rows into item -> attribute list."""
    attrs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            item, raw = fields
            values = [a for a in raw.split(",") if a]
            if not values:
                raise DatasetError(f"{path}:{lineno}: empty attribute list for item {item!r}")
            attrs.setdefault(item, set()).update(values)
    return {item: sorted(vals, key=_raw_key) for item, vals in attrs.items()}


def convert_ml1m(ratings_path, movies_path=None):
    """Read MovieLens `::`-delimited files; ratings become implicit feedback
    (the rating value is discarded), genres become attributes."""
    records = []
    with open(ratings_path, "r", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("::")
            if len(fields) != 4:
                raise DatasetError(
                    f"{ratings_path}:{lineno}: expected 4 ::-separated fields, got {len(fields)}"
                )
            user, item, _rating, ts = fields
            try:
                ts_int = int(ts)
            except ValueError:
                raise DatasetError(f"{ratings_path}:{lineno}: non-integer timestamp {ts!r}") from None
            records.append((user, item, ts_int))
    attrs = None
    if movies_path is not None:
        attrs = {}
        with open(movies_path, "r", encoding="latin-1") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                fields = line.split("::")
                if len(fields) != 3:
                    raise DatasetError(
                        f"{movies_path}:{lineno}: expected 3 ::-separated fields, got {len(fields)}"
                    )
                item, _title, genres = fields
                attrs[item] = sorted({g for g in genres.split("|") if g})
    return records, attrs


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Dataset:
    user_index: list  # dense user id -> raw user id
    item_index: list  # dense item id -> raw item id
    attr_index: list  # dense attribute id -> raw attribute id
    sequences: list  # per dense user: ordered dense item ids
    attr_map: list  # per dense item: sorted tuple of dense attribute ids
    stats: dict = field(default_factory=dict)
    _attr_csr: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_users(self):
        return len(self.user_index)

    @property
    def n_items(self):
        return len(self.item_index)

    @property
    def n_attrs(self):
        return len(self.attr_index)

    @property
    def user_sequences(self) -> dict:
        return {raw: seq for raw, seq in zip(self.user_index, self.sequences)}

    def raw_to_dense_item(self) -> dict:
        return {raw: i for i, raw in enumerate(self.item_index)}

    def attr_csr(self):
        """Concatenated attribute ids plus per-item offsets, for vectorized
        multi-hot target construction."""
        if self._attr_csr is None:
            flat, offsets = [], [0]
            for attrs in self.attr_map:
                flat.extend(attrs)
                offsets.append(len(flat))
            self._attr_csr = (np.asarray(flat, dtype=np.int64),
                              np.asarray(offsets, dtype=np.int64))
        return self._attr_csr


def compute_stats(sequences, attr_map, n_users, n_items, n_attrs) -> dict:
    actions = sum(len(s) for s in sequences)
    attr_total = sum(len(a) for a in attr_map)
    return {
        "n_users": n_users,
        "n_items": n_items,
        "n_actions": actions,
        "n_attributes": n_attrs,
        "avg_actions_per_user": round(actions / n_users, 4) if n_users else 0.0,
        "avg_actions_per_item": round(actions / n_items, 4) if n_items else 0.0,
        "sparsity": round(1.0 - actions / (n_users * n_items), 6) if n_users and n_items else 0.0,
        "avg_attributes_per_item": round(attr_total / n_items, 4) if n_items else 0.0,
    }


def stats_table(stats: dict) -> str:
    rows = [
        ("#users", f"{stats['n_users']:,}"),
        ("#items", f"{stats['n_items']:,}"),
        ("#actions", f"{stats['n_actions']:,}"),
        ("avg. actions/user", f"{stats['avg_actions_per_user']:.1f}"),
        ("avg. actions/item", f"{stats['avg_actions_per_item']:.1f}"),
        ("sparsity", f"{100 * stats['sparsity']:.2f}%"),
        ("#attributes", f"{stats['n_attributes']:,}"),
        ("avg. attributes/item", f"{stats['avg_attributes_per_item']:.1f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def preprocess(records, attrs=None, min_core: int = MIN_CORE) -> Dataset:
    """Dedup, sort, iterated core filtering, dense re-indexing."""
    if not records:
        raise DatasetError("no interaction records to preprocess")

    earliest = {}
    for user, item, ts in records:
        key = (user, item)
        if key not in earliest or ts < earliest[key]:
            earliest[key] = ts

    by_user: dict = {}
    for (user, item), ts in earliest.items():
        by_user.setdefault(user, []).append((ts, item))
    for user in by_user:
        by_user[user].sort(key=lambda r: (r[0], _raw_key(r[1])))

    # iterate user/item 5-core until both hold simultaneously
    users = set(by_user)
    items = {item for recs in by_user.values() for _, item in recs}
    while True:
        item_users: dict = {}
        for user in users:
            for _, item in by_user[user]:
                if item in items:
                    item_users[item] = item_users.get(item, 0) + 1
        keep_items = {i for i, c in item_users.items() if c >= min_core}
        keep_users = set()
        for user in users:
            degree = sum(1 for _, item in by_user[user] if item in keep_items)
            if degree >= min_core:
                keep_users.add(user)
        if keep_users == users and keep_items == items:
            break
        users, items = keep_users, keep_items
        if not users or not items:
            raise DatasetError(f"{min_core}-core filtering removed the entire dataset")

    user_index = sorted(users, key=_raw_key)
    item_index = sorted(items, key=_raw_key)
    item_dense = {raw: i for i, raw in enumerate(item_index)}

    sequences = []
    for user in user_index:
        sequences.append([item_dense[item] for _, item in by_user[user] if item in items])

    attr_values = set()
    raw_attr_map = {}
    if attrs:
        for raw_item, raw_attrs in attrs.items():
            if raw_item in item_dense:
                raw_attr_map[raw_item] = sorted(set(raw_attrs), key=_raw_key)
                attr_values.update(raw_attr_map[raw_item])
    attr_index = sorted(attr_values, key=_raw_key)
    attr_dense = {raw: i for i, raw in enumerate(attr_index)}
    attr_map = []
    for raw_item in item_index:
        dense = tuple(attr_dense[a] for a in raw_attr_map.get(raw_item, ()))
        attr_map.append(dense)

    stats = compute_stats(sequences, attr_map, len(user_index), len(item_index), len(attr_index))
    return Dataset(user_index, item_index, attr_index, sequences, attr_map, stats)


def dataset_to_records(dataset: Dataset):
    """Back-convert to raw triples (position index as timestamp); used to
    check that preprocessing is a fixpoint."""
    records = []
    for raw_user, seq in zip(dataset.user_index, dataset.sequences):
        for pos, item in enumerate(seq):
            records.append((raw_user, dataset.item_index[item], pos))
    attrs = {
        dataset.item_index[i]: [dataset.attr_index[a] for a in dataset.attr_map[i]]
        for i in range(dataset.n_items)
        if dataset.attr_map[i]
    }
    return records, attrs


# ---------------------------------------------------------------------------
# serialization


def save_dataset(dataset: Dataset, path) -> None:
    payload = {
        "version": DATASET_FORMAT_VERSION,
        "stats": dataset.stats,
        "user_index": dataset.user_index,
        "item_index": dataset.item_index,
        "attr_index": dataset.attr_index,
        "sequences": dataset.sequences,
        "attr_map": [list(a) for a in dataset.attr_map],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_dataset(path) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset cache {path}: {exc}") from None
    if payload.get("version") != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"dataset cache version {payload.get('version')!r} unsupported "
            f"(expected {DATASET_FORMAT_VERSION})"
        )
    ds = Dataset(
        user_index=payload["user_index"],
        item_index=payload["item_index"],
        attr_index=payload["attr_index"],
        sequences=payload["sequences"],
        attr_map=[tuple(a) for a in payload["attr_map"]],
        stats=payload["stats"],
    )
    for attrs in ds.attr_map:
        if any(a < 0 or a >= ds.n_attrs for a in attrs):
            raise VocabularyError("attribute id out of range in dataset cache")
    return ds


def fingerprint(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# leave-one-out split


@dataclass
class UserSplit:
    user: int  # dense user id
    train: list  # ordered dense item ids
    val: int
    test: int

    def reconstruct(self):
        return self.train + [self.val, self.test]


@dataclass
class SplitDataset:
    users: list  # of UserSplit, dense user order


def split_leave_one_out(dataset: Dataset, max_len: int = None) -> SplitDataset:
    """Last item for test, second-to-last for validation, rest for training;
    the training prefix keeps only the most recent ``max_len`` items."""
    users = []
    for dense, seq in enumerate(dataset.sequences):
        if len(seq) < 3:
            raise DatasetError(
                f"user {dataset.user_index[dense]!r} has fewer than 3 interactions"
            )
        train = seq[:-2]
        if max_len is not None:
            train = train[-max_len:]
        users.append(UserSplit(dense, list(train), seq[-2], seq[-1]))
    return SplitDataset(users)


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_interactions(n_users: int, n_items: int, n_attrs: int, avg_len: int,
                       seed: int, p_next: float = 0.55, p_within: float = 0.30,
                       p_jump: float = 0.15):
    """First-order Markov browsing sessions over planted item clusters.

    Items form contiguous clusters; each item strongly prefers its in-cluster
    ring successor, spreads some mass over the rest of its cluster, and jumps
    to one designated partner item in the next cluster. Returns the raw
    triples, the attribute sidecar, and the planted transition matrix.
    """
    if n_items < 20:
        raise ParameterError(f"need n_items >= 20, got {n_items}")
    if avg_len < 8:
        raise ParameterError(f"need avg_len >= 8, got {avg_len}")
    if n_users < 1 or n_attrs < 2:
        raise ParameterError("need n_users >= 1 and n_attrs >= 2")
    if min(p_next, p_within, p_jump) < 0 or abs(p_next + p_within + p_jump - 1.0) > 1e-9:
        raise ParameterError("transition probabilities must be nonnegative and sum to 1")

    rng = np.random.default_rng(seed)
    n_clusters = max(2, n_items // 10)
    bounds = np.linspace(0, n_items, n_clusters + 1).astype(int)
    members = [list(range(bounds[c], bounds[c + 1])) for c in range(n_clusters)]
    cluster_of = np.empty(n_items, dtype=int)
    for c, group in enumerate(members):
        cluster_of[group] = c

    transition = np.zeros((n_items, n_items))
    for i in range(n_items):
        c = cluster_of[i]
        group = members[c]
        offset = group.index(i)
        succ = group[(offset + 1) % len(group)]
        partner_group = members[(c + 1) % n_clusters]
        partner = partner_group[offset % len(partner_group)]
        transition[i, succ] += p_next
        rest = [j for j in group if j != i and j != succ]
        if rest:
            transition[i, rest] += p_within / len(rest)
        else:
            transition[i, succ] += p_within
        transition[i, partner] += p_jump
    transition /= transition.sum(axis=1, keepdims=True)

    records = []
    for u in range(n_users):
        length = max(8, int(rng.poisson(avg_len)))
        cur = int(rng.integers(n_items))
        for step in range(length):
            records.append((str(u), str(cur), step))
            cur = int(rng.choice(n_items, p=transition[cur]))

    secondary = [a for a in range(n_attrs) if a >= n_clusters]
    attrs = {}
    for i in range(n_items):
        chosen = [cluster_of[i] % n_attrs]
        if secondary:
            extra = int(rng.integers(0, 3))
            if extra:
                picks = rng.choice(secondary, size=min(extra, len(secondary)), replace=False)
                chosen.extend(int(p) for p in picks)
        attrs[str(i)] = [str(a) for a in sorted(set(chosen))]
    return records, attrs, transition


def synth_generate(n_users: int, n_items: int, n_attrs: int, avg_len: int,
                   seed: int, **kwargs) -> Dataset:
    records, attrs, _ = synth_interactions(n_users, n_items, n_attrs, avg_len, seed, **kwargs)
    return preprocess(records, attrs)


# ---------------------------------------------------------------------------
# batching


def pad_sequence(items, max_len: int, pad_id: int) -> np.ndarray:
    """Left-pad (or left-truncate) to exactly ``max_len`` ids."""
    items = list(items)[-max_len:]
    out = np.full(max_len, pad_id, dtype=np.int64)
    if items:
        out[max_len - len(items):] = items
    return out


@dataclass
class ViewBatch:
    ids: np.ndarray  # [B, T] with mask substitutions
    flat_pos: np.ndarray  # masked positions as b * T + t
    targets: np.ndarray  # ground-truth dense item ids at those positions


@dataclass
class Batch:
    users: np.ndarray  # dense user ids [B]
    seqs: np.ndarray  # original padded sequences [B, T]
    nonpad: np.ndarray  # bool [B, T]
    views: list = None  # M ViewBatch (bidirectional mode)
    target_flat: np.ndarray = None  # next-item positions, flat (autoregressive mode)
    target_ids: np.ndarray = None  # next-item ids at those positions
    anchor_flat: np.ndarray = None  # positions whose hidden states feed AP
    anchor_items: np.ndarray = None  # item ids whose attributes are the AP targets

    @property
    def size(self):
        return len(self.users)


def multihot_targets(item_ids, dataset: Dataset) -> np.ndarray:
    """Multi-hot attribute rows [len(item_ids), n_attrs]."""
    flat, offsets = dataset.attr_csr()
    ids = np.asarray(item_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= dataset.n_items):
        raise VocabularyError("item id out of range for attribute lookup")
    out = np.zeros((ids.size, max(dataset.n_attrs, 1)))
    if ids.size == 0 or flat.size == 0:
        return out
    starts, ends = offsets[ids], offsets[ids + 1]
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return out
    rows = np.repeat(np.arange(ids.size), lens)
    base = np.repeat(np.cumsum(lens) - lens, lens)
    cols = flat[np.repeat(starts, lens) + (np.arange(total) - base)]
    out[rows, cols] = 1.0
    return out


def _batch_chunks(n_users: int, batch_size: int, order) -> list:
    chunks = [order[i:i + batch_size] for i in range(0, n_users, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def batch_iter(split: SplitDataset, config: ModelConfig, batch_size: int,
               seed: int, epoch: int):
    """Deterministic epoch stream of training batches.

    Users are shuffled per (seed, epoch); masked views draw from per-user
    substreams keyed by (seed, epoch, user), so view composition does not
    depend on batch boundaries. A trailing batch of one user is merged into
    the previous batch so contrastive terms always have a negative.
    """
    if batch_size < 2:
        raise ContractError(f"batch size must be >= 2, got {batch_size}")
    t = config.max_len
    order = np.random.default_rng([seed, epoch]).permutation(len(split.users))
    for chunk in _batch_chunks(len(split.users), batch_size, order):
        users = [split.users[i] for i in chunk]
        b = len(users)
        seqs = np.stack([pad_sequence(u.train, t, config.pad_id) for u in users])
        nonpad = seqs != config.pad_id

        if config.mode == MODE_AUTOREGRESSIVE:
            rows, cols = np.nonzero(nonpad[:, :-1] & nonpad[:, 1:])
            target_flat = rows * t + cols
            target_ids = seqs[rows, cols + 1]
            yield Batch(
                users=np.asarray([u.user for u in users]),
                seqs=seqs, nonpad=nonpad,
                target_flat=target_flat, target_ids=target_ids,
                anchor_flat=target_flat, anchor_items=target_ids,
            )
            continue

        views = []
        per_user_views = []
        for row, u in zip(seqs, users):
            parent = np.random.default_rng([seed, epoch, u.user])
            per_user_views.append(
                make_views(row, config.n_views, config.mask_prop, parent,
                           config.mask_id, config.pad_id)
            )
        for m in range(config.n_views):
            ids = np.stack([pv[m].ids for pv in per_user_views])
            flat, targets = [], []
            for b_idx, pv in enumerate(per_user_views):
                flat.extend(b_idx * t + p for p in pv[m].masked_indices)
                targets.extend(pv[m].originals)
            views.append(ViewBatch(ids, np.asarray(flat, dtype=np.int64),
                                   np.asarray(targets, dtype=np.int64)))
        anchor_rows, anchor_cols = np.nonzero(nonpad)
        anchor_flat = anchor_rows * t + anchor_cols
        yield Batch(
            users=np.asarray([u.user for u in users]),
            seqs=seqs, nonpad=nonpad, views=views,
            anchor_flat=anchor_flat, anchor_items=seqs[anchor_rows, anchor_cols],
        )
