"""Central finite-difference verification of every differentiable primitive
and every loss term.

Each check builds a scalar function of its inputs, compares the analytic
gradient against (f(x+h) - f(x-h)) / 2h at sampled coordinates, and reports
the worst relative error. Distillation detaches its teacher branch, so its
finite-difference oracle evaluates a teacher-frozen copy of the objective;
everything else differentiates the same function it evaluates. Loss checks
run on a deliberately tiny model so the whole suite stays fast.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import losses as ls
from .autodiff import Tensor
from .data import Dataset, batch_iter, multihot_targets, split_leave_one_out
from .trainer import TrainConfig, compute_batch_losses

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-4
LOSS_TOL = 1e-3
ABS_FLOOR = 1e-8
POINTS_PER_INPUT = 10


@dataclass
class CheckResult:
    name: str
    kind: str  # "primitive" or "loss"
    worst_rel_err: float
    passed: bool


def _rel_err(analytic: float, fd: float) -> float:
    diff = abs(analytic - fd)
    if diff <= ABS_FLOOR:
        return 0.0
    return diff / max(abs(analytic), abs(fd), ABS_FLOOR)


def _seeded(name: str):
    return np.random.default_rng(zlib.crc32(name.encode()))


def check_gradients(fn, inputs, rng, n_points: int = POINTS_PER_INPUT,
                    fd_fn=None, corrupt: bool = False) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tape tensor. ``fd_fn``, when
    given, supplies the float the difference quotient is taken over (used
    where the analytic function intentionally stops gradients). ``corrupt``
    distorts the analytic gradient to prove the comparison can fail.
    """
    value_of = fd_fn if fd_fn is not None else (lambda: fn().item())
    for t in inputs:
        t.grad = None
    root = fn()
    ad.backward(root)
    worst = 0.0
    for tensor in inputs:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if corrupt:
            grad = grad * 1.01 + 1e-3
        flat = tensor.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_points, flat.size), replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + FD_STEP
            f_plus = value_of()
            flat[c] = keep - FD_STEP
            f_minus = value_of()
            flat[c] = keep
            fd = (f_plus - f_minus) / (2 * FD_STEP)
            worst = max(worst, _rel_err(grad.reshape(-1)[c], fd))
    return worst


def _weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Fixed random linear functional to turn any output into a scalar."""
    w = Tensor(np.random.default_rng(seed).standard_normal(out.shape))
    return ad.tsum(ad.mul(out, w))


def _t(rng, *shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def primitive_checks(rng):
    """(name, (fn, inputs)) pairs covering every differentiable primitive."""

    def binary(op, positive_b=False):
        a, b = _t(rng, 4, 5), _t(rng, 4, 5, positive=positive_b)
        return (lambda: _weighted_sum(op(a, b), 3)), [a, b]

    def unary(op, positive=False, shape=(4, 5)):
        x = _t(rng, *shape, positive=positive)
        return (lambda: _weighted_sum(op(x), 5)), [x]

    def build_matmul(batched):
        a = _t(rng, 2, 3, 4) if batched else _t(rng, 3, 4)
        b = _t(rng, 4, 6)
        return (lambda: _weighted_sum(ad.matmul(a, b), 7)), [a, b]

    def build_softmax():
        x = _t(rng, 3, 7)
        return (lambda: _weighted_sum(ad.softmax_with_temperature(x, 0.7), 9)), [x]

    def build_log_softmax():
        x = _t(rng, 3, 7)
        return (lambda: _weighted_sum(ad.log_softmax(x, 2.0), 9)), [x]

    def build_layer_norm():
        x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
        return (lambda: _weighted_sum(ad.layer_norm(x, g, b), 13)), [x, g, b]

    def build_cosine():
        u, v = _t(rng, 8), _t(rng, 8)
        return (lambda: ad.cosine_similarity(u, v)), [u, v]

    def build_gather():
        x = _t(rng, 9, 4)
        idx = np.array([[0, 3, 3], [8, 1, 0]])  # repeated row: grads must add
        return (lambda: _weighted_sum(ad.gather_rows(x, idx), 15)), [x]

    def build_concat():
        a, b = _t(rng, 3, 4), _t(rng, 2, 4)
        return (lambda: _weighted_sum(ad.concat([a, b], axis=0), 17)), [a, b]

    def build_dropout():
        x = _t(rng, 6, 6)
        # reseed per call so every evaluation sees the same frozen mask
        return (lambda: _weighted_sum(ad.dropout(x, 0.4, np.random.default_rng(21)), 19)), [x]

    def build_reduction(op, axis, keepdims):
        x = _t(rng, 3, 4, 5)
        return (lambda: _weighted_sum(op(x, axis=axis, keepdims=keepdims), 23)), [x]

    def build_attention():
        d, heads, b_sz, t_sz = 8, 2, 2, 5
        x = _t(rng, b_sz, t_sz, d)
        weights = [_t(rng, d, d) for _ in range(4)]
        biases = [_t(rng, d) for _ in range(4)]
        mask = np.zeros((b_sz, 1, 1, t_sz))
        mask[0, 0, 0, 0] = enc.NEG_INF  # one blocked key column

        def fn():
            out = ad.multi_head_attention(
                x, weights[0], biases[0], weights[1], biases[1],
                weights[2], biases[2], weights[3], biases[3],
                heads, additive_mask=mask,
            )
            return _weighted_sum(out, 25)

        return fn, [x] + weights + biases

    def build_reshape_swap():
        x = _t(rng, 3, 4, 2)

        def fn():
            return _weighted_sum(ad.swapaxes(ad.reshape(x, (3, 8)), 0, 1), 27)

        return fn, [x]

    return [
        ("add", binary(ad.add)),
        ("sub", binary(ad.sub)),
        ("mul", binary(ad.mul)),
        ("div", binary(ad.div, positive_b=True)),
        ("scale", unary(lambda x: ad.scale(x, -2.5))),
        ("matmul", build_matmul(batched=False)),
        ("matmul_batched", build_matmul(batched=True)),
        ("sum", build_reduction(ad.tsum, axis=(0, 2), keepdims=False)),
        ("mean", build_reduction(ad.tmean, axis=1, keepdims=True)),
        ("exp", unary(ad.texp)),
        ("log", unary(ad.tlog, positive=True)),
        ("sqrt", unary(ad.tsqrt, positive=True)),
        ("sigmoid", unary(ad.sigmoid)),
        ("relu", unary(ad.relu)),
        ("gelu", unary(ad.gelu)),
        ("embedding_gather", build_gather()),
        ("concat_rows", build_concat()),
        ("dropout", build_dropout()),
        ("softmax_temperature", build_softmax()),
        ("log_softmax", build_log_softmax()),
        ("layer_norm", build_layer_norm()),
        ("cosine_similarity", build_cosine()),
        ("reshape_swapaxes", build_reshape_swap()),
        ("multi_head_attention", build_attention()),
    ]


# ---------------------------------------------------------------------------
# loss-level checks on a tiny model


def tiny_setup(n_networks: int = 2, n_views: int = 2, batch: int = 3,
               seed: int = 1234):
    """Tiny ensemble plus one training batch for end-to-end gradient checks."""
    cfg = enc.ModelConfig(
        vocab_size=12, attr_size=3, max_len=6, hidden_dim=8, blocks=2, heads=2,
        n_networks=n_networks, n_views=n_views, dropout_rate=0.0, tau=1.0,
        lam=0.5, mu=0.5,
    )
    rng = np.random.default_rng(seed)
    sequences = []
    for _ in range(batch):
        length = int(rng.integers(3, cfg.max_len + 1))
        seq = rng.integers(0, cfg.vocab_size, size=length).tolist()
        sequences.append(seq + [0, 1])  # val and test markers
    attr_map = [tuple(sorted(set(rng.integers(0, cfg.attr_size, size=2).tolist())))
                for _ in range(cfg.vocab_size)]
    dataset = Dataset(
        user_index=[str(u) for u in range(batch)],
        item_index=[str(i) for i in range(cfg.vocab_size)],
        attr_index=[str(a) for a in range(cfg.attr_size)],
        sequences=sequences,
        attr_map=attr_map,
    )
    split = split_leave_one_out(dataset, max_len=cfg.max_len)
    ensemble = enc.init_ensemble(cfg, list(range(101, 101 + n_networks)))
    batch_obj = next(batch_iter(split, cfg, batch_size=batch, seed=7, epoch=0))
    return ensemble, batch_obj, dataset


def _np_log_softmax(a, tau):
    z = a / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _np_kd_value(frozen_logits, live_logits, tau):
    """Distillation value with teacher probabilities pinned at ``frozen_logits``."""
    total = 0.0
    n = len(live_logits)
    for x in range(n):
        for y in range(n):
            if x == y:
                continue
            for t_arr, s_t in zip(frozen_logits[x], live_logits[y]):
                z_t = np.exp(_np_log_softmax(t_arr, tau))
                log_zt = np.log(np.maximum(z_t, ad.LOG_EPS))
                total += float((z_t * (log_zt - _np_log_softmax(s_t.data, tau))).sum())
    return total


def loss_checks(points_per_param: int = 4):
    """(name, fn, fd_fn, inputs, points) covering each loss and the total."""
    ensemble, batch, dataset = tiny_setup()
    cfg = ensemble.config
    params = [t for net in ensemble.networks for _, t in net.named()]
    b, t = batch.seqs.shape

    def forwards():
        anchors, view_h, logits = [], [], []
        for net in ensemble.networks:
            anchors.append(enc.encode(net, batch.seqs, cfg))
            per_h, per_logits = [], []
            for view in batch.views:
                h = enc.encode(net, view.ids, cfg)
                per_h.append(h)
                rows = ad.gather_rows(ad.reshape(h, (b * t, -1)), view.flat_pos)
                per_logits.append(enc.item_logits(net, rows))
            view_h.append(per_h)
            logits.append(per_logits)
        return anchors, view_h, logits

    def mip_fn():
        _, _, logits = forwards()
        return ls.mip_loss(logits, [v.targets for v in batch.views])

    def ap_fn():
        y = multihot_targets(batch.anchor_items, dataset)
        probs = []
        for net in ensemble.networks:
            h = enc.encode(net, batch.seqs, cfg)
            rows = ad.gather_rows(ad.reshape(h, (b * t, -1)), batch.anchor_flat)
            probs.append(enc.attr_probs(net, rows))
        return ls.ap_loss(probs, y)

    def icl_fn():
        anchors, view_h, _ = forwards()
        return ls.icl_loss(anchors, view_h, batch.nonpad, cfg.tau)

    def ccl_fn():
        anchors, view_h, _ = forwards()
        return ls.ccl_loss(anchors, view_h, batch.nonpad, cfg.tau)

    def kd_fn():
        _, _, logits = forwards()
        return ls.kd_loss(logits, cfg.tau)

    # teacher-frozen oracles: the analytic kd gradient only flows through the
    # student branch, so the difference quotient must hold teachers at the
    # unperturbed parameters
    frozen = [[l.data.copy() for l in per] for per in forwards()[2]]

    def kd_fd():
        _, _, logits = forwards()
        return _np_kd_value(frozen, logits, cfg.tau)

    train_cfg = TrainConfig(seed=7, epochs=1)

    def total_fn():
        total, _ = compute_batch_losses(ensemble, batch, dataset, train_cfg,
                                        [None] * len(ensemble.networks))
        return total

    def total_fd():
        parts = (mip_fn().item() + ap_fn().item()
                 + cfg.lam * (icl_fn().item() + ccl_fn().item()))
        return parts + cfg.mu * kd_fd()

    return [
        ("loss_mip", mip_fn, None, params, points_per_param),
        ("loss_ap", ap_fn, None, params, points_per_param),
        ("loss_icl", icl_fn, None, params, points_per_param),
        ("loss_ccl", ccl_fn, None, params, points_per_param),
        ("loss_kd", kd_fn, kd_fd, params, points_per_param),
        ("loss_total", total_fn, total_fd, params, points_per_param),
    ]


def run_all(corrupt_op: str = None, points_per_param: int = 4):
    """Execute the full suite; returns (results, elapsed_seconds)."""
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    results = []
    for name, (fn, inputs) in primitive_checks(rng):
        err = check_gradients(fn, inputs, _seeded(name), corrupt=(corrupt_op == name))
        results.append(CheckResult(name, "primitive", err, err < PRIMITIVE_TOL))
    for name, fn, fd_fn, inputs, points in loss_checks(points_per_param):
        err = check_gradients(fn, inputs, _seeded(name), n_points=points,
                              fd_fn=fd_fn, corrupt=(corrupt_op == name))
        results.append(CheckResult(name, "loss", err, err < LOSS_TOL))
    return results, time.perf_counter() - started


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'kind':<9}  {'worst rel err':>13}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.kind:<9}  {r.worst_rel_err:13.3e}  {status}")
    return "\n".join(lines)
