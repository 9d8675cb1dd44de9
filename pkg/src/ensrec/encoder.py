"""Bidirectional Transformer sequence encoder, classifier heads, and the
N-network ensemble constructor.

Vocabulary layout: dense item ids occupy 0..vocab_size-1; two extra rows are
appended to the embedding table, index vocab_size for the mask token and
vocab_size+1 for padding. Sequences are left-padded so the appended mask
token at inference always sits at the final position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sp_stats

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, ParameterError, VocabularyError

MODE_BIDIRECTIONAL = "mlm"  # masked-item cloze training, unrestricted attention
MODE_AUTOREGRESSIVE = "nip"  # next-item prediction, causal attention

NEG_INF = -1e9  # additive attention mask for blocked positions

INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    attr_size: int
    max_len: int
    hidden_dim: int = 256
    blocks: int = 2
    heads: int = 2
    n_networks: int = 3
    n_views: int = 2
    mask_prop: float = 0.15
    dropout_rate: float = 0.1
    tau: float = 1.0
    lam: float = 0.1
    mu: float = 0.1
    mode: str = MODE_BIDIRECTIONAL
    nonlinearity: str = "gelu"
    norm_style: str = "post"
    pooling: str = "flatten"  # sequence-representation pooling for contrastive losses
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        problems = []
        if self.vocab_size < 1:
            problems.append(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.attr_size < 1:
            problems.append(f"attr_size must be >= 1, got {self.attr_size}")
        if self.max_len < 2:
            problems.append(f"max_len must be >= 2, got {self.max_len}")
        if self.hidden_dim < 1 or self.hidden_dim % self.heads:
            problems.append(
                f"hidden_dim {self.hidden_dim} must be positive and divisible by heads {self.heads}"
            )
        if self.blocks < 1:
            problems.append(f"blocks must be >= 1, got {self.blocks}")
        if self.n_networks < 1:
            problems.append(f"n_networks must be >= 1, got {self.n_networks}")
        if not 1 <= self.n_views <= 8:
            problems.append(f"n_views must be in [1, 8], got {self.n_views}")
        if not 0 < self.mask_prop < 1:
            problems.append(f"mask_prop must be in (0, 1), got {self.mask_prop}")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.1 <= self.tau <= 10:
            problems.append(f"tau must be in [0.1, 10], got {self.tau}")
        if not 0.01 <= self.lam <= 1:
            problems.append(f"lam must be in [0.01, 1], got {self.lam}")
        if not 0.01 <= self.mu <= 1:
            problems.append(f"mu must be in [0.01, 1], got {self.mu}")
        if self.mode not in (MODE_BIDIRECTIONAL, MODE_AUTOREGRESSIVE):
            problems.append(f"mode must be 'mlm' or 'nip', got {self.mode!r}")
        if self.nonlinearity not in ("gelu", "relu"):
            problems.append(f"nonlinearity must be 'gelu' or 'relu', got {self.nonlinearity!r}")
        if self.norm_style not in ("post", "pre"):
            problems.append(f"norm_style must be 'post' or 'pre', got {self.norm_style!r}")
        if self.pooling not in ("flatten", "mean"):
            problems.append(f"pooling must be 'flatten' or 'mean', got {self.pooling!r}")
        if problems:
            raise ParameterError("invalid model config: " + "; ".join(problems))

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def pad_id(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _trunc_normal(rng, shape, std=INIT_STD):
    flat = sp_stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=int(np.prod(shape)), random_state=rng)
    return flat.reshape(shape)


def _param(rng, shape):
    return Tensor(_trunc_normal(rng, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class BlockParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self):
        for name in self.__dataclass_fields__:
            yield name, getattr(self, name)


class EncoderParams:
    """One network's learnable state. Each instance owns its arrays."""

    def __init__(self, config: ModelConfig, seed: int):
        d = config.hidden_dim
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.item_emb = _param(rng, (config.vocab_size + 2, d))
        self.pos_emb = _param(rng, (config.max_len, d))
        self.blocks = []
        for _ in range(config.blocks):
            self.blocks.append(
                BlockParams(
                    wq=_param(rng, (d, d)), bq=_zeros(d),
                    wk=_param(rng, (d, d)), bk=_zeros(d),
                    wv=_param(rng, (d, d)), bv=_zeros(d),
                    wo=_param(rng, (d, d)), bo=_zeros(d),
                    ln1_g=_ones(d), ln1_b=_zeros(d),
                    w1=_param(rng, (d, 4 * d)), b1=_zeros(4 * d),
                    w2=_param(rng, (4 * d, d)), b2=_zeros(d),
                    ln2_g=_ones(d), ln2_b=_zeros(d),
                )
            )
        self.item_w = _param(rng, (d, config.vocab_size))
        self.item_b = _zeros(config.vocab_size)
        self.attr_w = _param(rng, (d, config.attr_size))
        self.attr_b = _zeros(config.attr_size)

    def named(self):
        yield "item_emb", self.item_emb
        yield "pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"blocks.{i}.{name}", t
        yield "item_w", self.item_w
        yield "item_b", self.item_b
        yield "attr_w", self.attr_w
        yield "attr_b", self.attr_b

    def zero_grad(self):
        for _, t in self.named():
            t.grad = None


class Ensemble:
    """N independently initialized networks plus the seeds that made them."""

    def __init__(self, config: ModelConfig, networks, seeds):
        self.config = config
        self.networks = list(networks)
        self.seeds = list(seeds)

    def __len__(self):
        return len(self.networks)

    def zero_grad(self):
        for net in self.networks:
            net.zero_grad()


def init_ensemble(config: ModelConfig, seeds) -> Ensemble:
    seeds = [int(s) for s in seeds]
    if len(seeds) != config.n_networks:
        raise ParameterError(
            f"expected {config.n_networks} seeds, got {len(seeds)}"
        )
    if len(set(seeds)) != len(seeds):
        raise ParameterError(f"network seeds must be pairwise distinct, got {seeds}")
    return Ensemble(config, [EncoderParams(config, s) for s in seeds], seeds)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count of a single network."""
    d, v, a, t = config.hidden_dim, config.vocab_size, config.attr_size, config.max_len
    per_block = 4 * d * d + 4 * d + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d) + 2 * d
    return (v + 2) * d + t * d + config.blocks * per_block + (d * v + v) + (d * a + a)


def embed(params: EncoderParams, seqs, config: ModelConfig, *, training=False, rng=None) -> Tensor:
    """Item embedding plus positional embedding for padded id sequences [B, T]."""
    ids = np.asarray(seqs)
    if ids.ndim != 2:
        raise DimensionError(f"expected [B, T] ids, got shape {ids.shape}")
    if ids.shape[1] != config.max_len:
        raise DimensionError(
            f"sequence length {ids.shape[1]} != configured max_len {config.max_len}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size + 2):
        raise VocabularyError(
            f"item id out of range [0, {config.vocab_size + 2}) in input batch"
        )
    e = ad.add(ad.gather_rows(params.item_emb, ids), params.pos_emb)
    if training and config.dropout_rate > 0:
        e = ad.dropout(e, config.dropout_rate, rng)
    return e


def attention_mask(ids, config: ModelConfig):
    """Additive mask [B, 1, T, T]: blocks pad keys, plus future keys in
    autoregressive mode.

    The diagonal always stays open: a row whose keys were otherwise all
    blocked (a pad position under the causal mask) would degenerate into a
    softmax over the raw scores of blocked keys and leak future information
    into pad rows."""
    ids = np.asarray(ids)
    b, t = ids.shape
    mask = np.zeros((b, 1, 1, t))
    mask[:, 0, 0, :][ids == config.pad_id] = NEG_INF
    mask = np.broadcast_to(mask, (b, 1, t, t)).copy()
    if config.mode == MODE_AUTOREGRESSIVE:
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        mask = mask + causal[None, None]
    mask[:, :, np.arange(t), np.arange(t)] = 0.0
    return mask


def _block_forward(x, blk: BlockParams, mask, config: ModelConfig, training, rng):
    act = ad.gelu if config.nonlinearity == "gelu" else ad.relu
    rate = config.dropout_rate if training else 0.0

    def attn(inp):
        return ad.multi_head_attention(
            inp, blk.wq, blk.bq, blk.wk, blk.bk, blk.wv, blk.bv, blk.wo, blk.bo,
            config.heads, additive_mask=mask, dropout_rate=rate, rng=rng,
        )

    def ffn(inp):
        h = act(ad.add(ad.matmul(inp, blk.w1), blk.b1))
        h = ad.add(ad.matmul(h, blk.w2), blk.b2)
        if rate > 0:
            h = ad.dropout(h, rate, rng)
        return h

    if config.norm_style == "post":
        x = ad.layer_norm(ad.add(x, attn(x)), blk.ln1_g, blk.ln1_b)
        x = ad.layer_norm(ad.add(x, ffn(x)), blk.ln2_g, blk.ln2_b)
    else:
        x = ad.add(x, attn(ad.layer_norm(x, blk.ln1_g, blk.ln1_b)))
        x = ad.add(x, ffn(ad.layer_norm(x, blk.ln2_g, blk.ln2_b)))
    return x


def encode(params: EncoderParams, seqs, config: ModelConfig, *, training=False,
           rng=None, attn_mask=None) -> Tensor:
    """Hidden representations [B, T, d] of padded id sequences [B, T].

    ``attn_mask`` may carry a precomputed mask for this pad pattern; callers
    running many forwards over the same batch share one.
    """
    if training and config.dropout_rate > 0 and rng is None:
        raise ContractError("training-mode encode with dropout needs an rng")
    x = embed(params, seqs, config, training=training, rng=rng)
    mask = attention_mask(seqs, config) if attn_mask is None else attn_mask
    for blk in params.blocks:
        x = _block_forward(x, blk, mask, config, training, rng)
    return x


def _affine(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if h.ndim == 1:
        return ad.reshape(ad.add(ad.matmul(ad.reshape(h, (1, -1)), w), b), (-1,))
    return ad.add(ad.matmul(h, w), b)


def item_logits(params: EncoderParams, h: Tensor) -> Tensor:
    """Linear item classifier over real items (mask/pad rows excluded)."""
    return _affine(h, params.item_w, params.item_b)


def attr_probs(params: EncoderParams, h: Tensor) -> Tensor:
    """Per-attribute independent probabilities via a sigmoid affine head."""
    return ad.sigmoid(_affine(h, params.attr_w, params.attr_b))
