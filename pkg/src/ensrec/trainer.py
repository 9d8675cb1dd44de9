"""Optimization loop: Adam over the ensemble, the stepped learning-rate
schedule, ablation switches, checkpointing, and best-validation tracking.

All loss terms join in a single scalar and one backward pass covers every
network; each network then takes its own Adam step. Random streams are keyed
per network and per (epoch, batch) so that independent-training runs are
bitwise identical to separate single-network runs with the same seeds.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import autodiff as ad
from . import encoder as enc
from . import losses as ls
from .data import Batch, Dataset, SplitDataset, batch_iter, multihot_targets
from .errors import CheckpointError, ParameterError
from .evaluation import evaluate

logger = logging.getLogger("ensrec.trainer")

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 250
    decay_period: int = 100
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    batch_size: int = 256
    eval_every: int = 5
    grad_clip: float = None
    no_icl: bool = False
    no_ccl: bool = False
    no_kd: bool = False
    no_ap: bool = False
    independent_training: bool = False

    def __post_init__(self):
        problems = []
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.decay_factor <= 1:
            problems.append(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_period < 1:
            problems.append(f"decay_period must be >= 1, got {self.decay_period}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append(f"grad_clip must be positive, got {self.grad_clip}")
        if problems:
            raise ParameterError("invalid train config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class AdamState:
    """First/second moment arrays per parameter plus the shared step count."""

    def __init__(self):
        self.moments = {}
        self.step = 0


def adam_step(named_params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over (name, tensor) pairs, in place.

    Parameters whose gradient is absent are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            if name not in state.moments:
                continue  # untouched so far: moments are zero, update is zero
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Stepped exponential decay: the rate drops by decay_factor every
    decay_period epochs."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.decay_factor ** (epoch // config.decay_period)


def _clip_gradients(net: enc.EncoderParams, max_norm: float) -> None:
    total = 0.0
    for _, p in net.named():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in net.named():
            if p.grad is not None:
                p.grad = p.grad * scale  # grads may be read-only views


def compute_batch_losses(ensemble: enc.Ensemble, batch: Batch, dataset: Dataset,
                         config: TrainConfig, rngs):
    """Forward all networks on a batch and combine the active loss terms.

    Returns (total tape tensor, LossReport). ``rngs`` holds one dropout
    stream per network, consumed in a fixed order (anchor first, then views).
    """
    cfg = ensemble.config
    n = len(ensemble.networks)
    icl_on = not (config.no_icl or config.independent_training)
    ccl_on = n >= 2 and not (config.no_ccl or config.independent_training)
    kd_on = n >= 2 and not (config.no_kd or config.independent_training)
    ap_on = not config.no_ap
    autoregressive = cfg.mode == enc.MODE_AUTOREGRESSIVE
    if autoregressive:
        icl_on = ccl_on = False  # no masked views exist in this mode

    b, t = batch.seqs.shape
    need_anchor = ap_on or icl_on or ccl_on or autoregressive
    # one pad pattern per batch (masking only rewrites non-pad positions)
    attn_mask = enc.attention_mask(batch.seqs, cfg)

    anchors, anchor_rows = [], []
    for net, rng in zip(ensemble.networks, rngs):
        if need_anchor:
            h = enc.encode(net, batch.seqs, cfg, training=True, rng=rng,
                           attn_mask=attn_mask)
            anchors.append(h)
            anchor_rows.append(ad.gather_rows(ad.reshape(h, (b * t, -1)), batch.anchor_flat))
        else:
            anchors.append(None)
            anchor_rows.append(None)

    if autoregressive:
        logits = [[enc.item_logits(net, rows)]
                  for net, rows in zip(ensemble.networks, anchor_rows)]
        targets = [batch.target_ids]
    else:
        logits, targets = [], [v.targets for v in batch.views]
        view_h = []
        for net, rng in zip(ensemble.networks, rngs):
            per_net_h, per_net_logits = [], []
            for view in batch.views:
                h = enc.encode(net, view.ids, cfg, training=True, rng=rng,
                               attn_mask=attn_mask)
                per_net_h.append(h)
                rows = ad.gather_rows(ad.reshape(h, (b * t, -1)), view.flat_pos)
                per_net_logits.append(enc.item_logits(net, rows))
            view_h.append(per_net_h)
            logits.append(per_net_logits)

    mip = ls.mip_loss(logits, targets)

    ap = None
    if ap_on:
        y = multihot_targets(batch.anchor_items, dataset)
        probs = [enc.attr_probs(net, rows)
                 for net, rows in zip(ensemble.networks, anchor_rows)]
        ap = ls.ap_loss(probs, y)

    icl = ccl = None
    if icl_on or ccl_on:
        anchor_reps = [ls.sequence_reps(h, batch.nonpad, cfg.pooling) for h in anchors]
        view_reps = [[ls.sequence_reps(h, batch.nonpad, cfg.pooling) for h in per_net]
                     for per_net in view_h]
        if icl_on:
            icl = ls.icl_from_reps(anchor_reps, view_reps, cfg.tau,
                                   cfg.include_positive_in_denominator)
        if ccl_on:
            ccl = ls.ccl_from_reps(anchor_reps, view_reps, cfg.tau,
                                   cfg.include_positive_in_denominator)

    kd = ls.kd_loss(logits, cfg.tau) if kd_on else None
    return ls.total_loss(mip, ap, icl, ccl, kd, cfg.lam, cfg.mu)


def train_epoch(ensemble: enc.Ensemble, split: SplitDataset, dataset: Dataset,
                config: TrainConfig, epoch: int, adam_states) -> ls.LossReport:
    """One pass over the shuffled batches; returns summed loss components."""
    cfg = ensemble.config
    lr = lr_at(epoch, config)
    sums = {"mip": 0.0, "ap": 0.0, "icl": 0.0, "ccl": 0.0, "kd": 0.0, "total": 0.0}
    for batch_idx, batch in enumerate(
        batch_iter(split, cfg, config.batch_size, config.seed, epoch)
    ):
        rngs = [np.random.default_rng([seed, epoch, batch_idx]) for seed in ensemble.seeds]
        total, report = compute_batch_losses(ensemble, batch, dataset, config, rngs)
        if not np.isfinite(report.total):
            raise FloatingPointError(
                f"non-finite loss at epoch {epoch} batch {batch_idx}: {report.as_dict()}"
            )
        ensemble.zero_grad()
        ad.backward(total)
        for net, state in zip(ensemble.networks, adam_states):
            if config.grad_clip is not None:
                _clip_gradients(net, config.grad_clip)
            adam_step(net.named(), state, lr, config.beta1, config.beta2, config.adam_eps)
        for key, value in report.as_dict().items():
            sums[key] += value
    return ls.LossReport(**sums)


@dataclass
class TrainResult:
    history: list  # per-epoch loss records
    validations: list  # {"epoch", "hr10", "ndcg10"} records
    best_epoch: int = None
    best_ndcg10: float = None


def train(ensemble: enc.Ensemble, split: SplitDataset, dataset: Dataset,
          config: TrainConfig, *, adam_states=None, start_epoch: int = 0,
          best_checkpoint_path=None, dataset_fingerprint=None,
          on_epoch=None, on_validation=None) -> TrainResult:
    """Run the full recipe: per-epoch losses, periodic validation, and
    best-validation checkpointing (by NDCG@10).

    ``on_epoch`` / ``on_validation`` receive each record as it is produced so
    callers can stream them to a log.
    """
    if adam_states is None:
        adam_states = [AdamState() for _ in ensemble.networks]
    result = TrainResult(history=[], validations=[])
    for epoch in range(start_epoch, config.epochs):
        report = train_epoch(ensemble, split, dataset, config, epoch, adam_states)
        record = {"epoch": epoch, "lr": lr_at(epoch, config), **report.as_dict()}
        result.history.append(record)
        if on_epoch:
            on_epoch(record)
        last = epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or last:
            val = evaluate(ensemble, split, target="val")
            vrec = {"epoch": epoch, "hr10": val.hr[10], "ndcg10": val.ndcg[10]}
            result.validations.append(vrec)
            if on_validation:
                on_validation(vrec)
            if result.best_ndcg10 is None or val.ndcg[10] > result.best_ndcg10:
                result.best_ndcg10 = val.ndcg[10]
                result.best_epoch = epoch
                if best_checkpoint_path is not None:
                    save_checkpoint(
                        best_checkpoint_path, ensemble, adam_states,
                        epoch=epoch, best_val_ndcg10=val.ndcg[10],
                        dataset_fingerprint=dataset_fingerprint,
                    )
    return result


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, ensemble: enc.Ensemble, adam_states=None, *,
                    epoch: int = None, best_val_ndcg10: float = None,
                    dataset_fingerprint: str = None) -> None:
    """Write a self-describing container; round-trips are bit-exact."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "tool_version": __version__,
        "config": ensemble.config.to_dict(),
        "seeds": ensemble.seeds,
        "epoch": epoch,
        "best_val_ndcg10": best_val_ndcg10,
        "dataset_fingerprint": dataset_fingerprint,
        "has_optimizer": adam_states is not None,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, net in enumerate(ensemble.networks):
        for name, tensor in net.named():
            arrays[f"net{i}:{name}"] = tensor.data
    if adam_states is not None:
        for i, state in enumerate(adam_states):
            arrays[f"adam{i}:step"] = np.asarray(state.step)
            for name, (m, v) in state.moments.items():
                arrays[f"adam{i}:{name}:m"] = m
                arrays[f"adam{i}:{name}:v"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Rebuild (ensemble, adam_states, meta) from a checkpoint file."""
    try:
        with np.load(path) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata block")
    try:
        meta = json.loads(bytes(arrays["__meta__"]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {meta.get('format')!r} unsupported (expected {CHECKPOINT_FORMAT})"
        )
    config = enc.ModelConfig.from_dict(meta["config"])
    ensemble = enc.init_ensemble(config, meta["seeds"])
    for i, net in enumerate(ensemble.networks):
        for name, tensor in net.named():
            key = f"net{i}:{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint {path} missing array {key!r}")
            stored = arrays[key]
            if stored.shape != tensor.data.shape:
                raise CheckpointError(
                    f"checkpoint array {key!r} has shape {stored.shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data = stored.astype(ad.default_dtype(), copy=True)
    adam_states = None
    if meta.get("has_optimizer"):
        adam_states = []
        for i in range(len(ensemble.networks)):
            state = AdamState()
            state.step = int(arrays[f"adam{i}:step"])
            for name, _ in ensemble.networks[i].named():
                mk, vk = f"adam{i}:{name}:m", f"adam{i}:{name}:v"
                if mk in arrays:
                    state.moments[name] = (arrays[mk].copy(), arrays[vk].copy())
            adam_states.append(state)
    return ensemble, adam_states, meta
