import json

import numpy as np
import pytest

from ensrec import autodiff as ad
from ensrec import data as dt
from ensrec import encoder as enc
from ensrec import trainer as tr
from ensrec.autodiff import Tensor
from ensrec.errors import CheckpointError, ParameterError

from conftest import make_config


def train_setup(dataset, *, n_networks=2, epochs=2, seed=5, batch_size=16,
                model_overrides=None, **flags):
    cfg = make_config(dataset, n_networks=n_networks, **(model_overrides or {}))
    split = dt.split_leave_one_out(dataset, max_len=cfg.max_len)
    ens = enc.init_ensemble(cfg, [seed + 100 + i for i in range(n_networks)])
    tcfg = tr.TrainConfig(epochs=epochs, seed=seed, batch_size=batch_size,
                          eval_every=2, **flags)
    return ens, split, tcfg


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_signed_lr():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    x.grad = np.array([0.3, -0.7, 2.0])
    state = tr.AdamState()
    before = x.data.copy()
    tr.adam_step([("x", x)], state, lr=0.01)
    delta = x.data - before
    np.testing.assert_allclose(delta, -0.01 * np.sign(x.grad), rtol=1e-6)


def test_adam_zero_grads_leave_params_and_increment_step():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    x.grad = np.zeros(2)
    state = tr.AdamState()
    tr.adam_step([("x", x)], state, lr=0.1)
    assert state.step == 1
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


def test_adam_missing_grad_treated_as_zero():
    x = Tensor(np.array([3.0]), requires_grad=True)
    state = tr.AdamState()
    tr.adam_step([("x", x)], state, lr=0.1)
    assert state.step == 1
    np.testing.assert_array_equal(x.data, [3.0])


def test_adam_converges_on_square():
    x = Tensor(np.array([1.0]), requires_grad=True)
    state = tr.AdamState()
    for _ in range(100):
        x.grad = 2.0 * x.data
        tr.adam_step([("x", x)], state, lr=0.1)
    assert abs(float(x.data[0])) < 0.05


def test_adam_aborts_on_nonfinite_grad():
    x = Tensor(np.array([1.0]), requires_grad=True)
    x.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError) as err:
        tr.adam_step([("blocks.0.wq", x)], tr.AdamState(), lr=0.1)
    assert "blocks.0.wq" in str(err.value)


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule_values():
    cfg = tr.TrainConfig()
    assert tr.lr_at(0, cfg) == pytest.approx(0.001)
    assert tr.lr_at(99, cfg) == pytest.approx(0.001)
    assert tr.lr_at(100, cfg) == pytest.approx(0.0005)
    assert tr.lr_at(200, cfg) == pytest.approx(0.00025)


def test_lr_schedule_custom_factor():
    cfg = tr.TrainConfig(decay_factor=0.1, decay_period=10)
    assert tr.lr_at(25, cfg) == pytest.approx(0.001 * 0.01)


def test_lr_rejects_negative_epoch():
    with pytest.raises(ParameterError):
        tr.lr_at(-1, tr.TrainConfig())


def test_train_config_validation_lists_problems():
    with pytest.raises(ParameterError) as err:
        tr.TrainConfig(lr=-1, decay_factor=0.0, batch_size=1)
    msg = str(err.value)
    assert "lr" in msg and "decay_factor" in msg and "batch_size" in msg


# ---------------------------------------------------------------------------
# epochs


def test_train_epoch_smoke_all_fields_finite(small_dataset):
    ens, split, tcfg = train_setup(small_dataset)
    states = [tr.AdamState() for _ in ens.networks]
    report = tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    for key, value in report.as_dict().items():
        assert np.isfinite(value), key
    assert report.mip > 0 and report.ap > 0 and report.kd >= 0


def test_train_epoch_deterministic(small_dataset):
    reports = []
    for _ in range(2):
        ens, split, tcfg = train_setup(small_dataset)
        states = [tr.AdamState() for _ in ens.networks]
        reports.append(tr.train_epoch(ens, split, small_dataset, tcfg, 0, states))
    assert reports[0].as_dict() == pytest.approx(reports[1].as_dict(), abs=1e-9)


def test_training_reduces_masked_item_loss(small_dataset):
    ens, split, tcfg = train_setup(small_dataset, epochs=12, batch_size=16)
    states = [tr.AdamState() for _ in ens.networks]
    first = tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    last = None
    for epoch in range(1, 12):
        last = tr.train_epoch(ens, split, small_dataset, tcfg, epoch, states)
    assert last.mip < first.mip


def test_backward_loss_equals_report_total(small_dataset):
    ens, split, tcfg = train_setup(small_dataset)
    cfg = ens.config
    batch = next(dt.batch_iter(split, cfg, 16, tcfg.seed, 0))
    rngs = [np.random.default_rng([s, 0, 0]) for s in ens.seeds]
    total, report = tr.compute_batch_losses(ens, batch, small_dataset, tcfg, rngs)
    assert total.item() == pytest.approx(report.total, abs=1e-9)
    assert report.decomposition_error(cfg.lam, cfg.mu) < 1e-9


def test_ablation_flags_zero_components(small_dataset):
    ens, split, tcfg = train_setup(
        small_dataset, no_icl=True, no_ccl=True, no_kd=True, no_ap=True)
    states = [tr.AdamState() for _ in ens.networks]
    report = tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    assert report.icl == report.ccl == report.kd == report.ap == 0.0
    assert report.total == pytest.approx(report.mip, abs=1e-9)


def test_single_encoder_degenerates_to_plain_mip(small_dataset):
    ens, split, tcfg = train_setup(
        small_dataset, n_networks=1,
        no_icl=True, no_ccl=True, no_kd=True, no_ap=True)
    states = [tr.AdamState()]
    report = tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    assert report.total == pytest.approx(report.mip, abs=1e-9)
    assert report.icl == report.ccl == report.kd == report.ap == 0.0
    # attribute head untouched in this mode
    assert ens.networks[0].attr_w.grad is None


def test_independent_training_matches_solo_runs(small_dataset):
    # two epochs of joint independent training must equal two separate
    # single-network runs parameter-for-parameter
    n = 2
    ens, split, tcfg = train_setup(small_dataset, n_networks=n, epochs=2,
                                   independent_training=True)
    states = [tr.AdamState() for _ in ens.networks]
    for epoch in range(2):
        tr.train_epoch(ens, split, small_dataset, tcfg, epoch, states)

    for idx in range(n):
        cfg1 = make_config(small_dataset, n_networks=1)
        solo = enc.Ensemble(cfg1, [enc.EncoderParams(cfg1, ens.seeds[idx])],
                            [ens.seeds[idx]])
        solo_states = [tr.AdamState()]
        solo_cfg = tr.TrainConfig(epochs=2, seed=tcfg.seed, batch_size=16,
                                  eval_every=2, independent_training=True)
        for epoch in range(2):
            tr.train_epoch(solo, split, small_dataset, solo_cfg, epoch, solo_states)
        for (name, joint_t), (_, solo_t) in zip(ens.networks[idx].named(),
                                                solo.networks[0].named()):
            np.testing.assert_allclose(joint_t.data, solo_t.data, atol=1e-9,
                                       err_msg=f"net {idx} param {name}")


def test_grad_clip_caps_update_norm(small_dataset):
    ens, split, tcfg = train_setup(small_dataset, grad_clip=1e-8)
    states = [tr.AdamState() for _ in ens.networks]
    before = {n: t.data.copy() for n, t in ens.networks[0].named()}
    tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    # clipped to a vanishing norm: parameters barely move
    for name, t in ens.networks[0].named():
        if t.grad is not None:
            assert np.abs(t.data - before[name]).max() < 1e-2


def test_nonfinite_loss_aborts_with_diagnostics(small_dataset):
    ens, split, tcfg = train_setup(small_dataset)
    ens.networks[0].item_emb.data[:] = np.inf
    states = [tr.AdamState() for _ in ens.networks]
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(FloatingPointError) as err:
            tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    assert "epoch 0" in str(err.value)


def test_autoregressive_epoch_and_learning(small_dataset):
    ens, split, tcfg = train_setup(small_dataset, n_networks=2, epochs=8,
                                   model_overrides={"mode": "nip"})
    states = [tr.AdamState() for _ in ens.networks]
    first = tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    assert first.icl == first.ccl == 0.0  # no masked views in this mode
    assert first.kd >= 0
    last = None
    for epoch in range(1, 8):
        last = tr.train_epoch(ens, split, small_dataset, tcfg, epoch, states)
    assert last.mip < first.mip


# ---------------------------------------------------------------------------
# the full loop


def test_train_tracks_best_validation(small_dataset, tmp_path):
    ens, split, tcfg = train_setup(small_dataset, epochs=6, seed=9)
    best_path = tmp_path / "best.npz"
    result = tr.train(ens, split, small_dataset, tcfg,
                      best_checkpoint_path=best_path)
    assert len(result.history) == 6
    evaluated = {v["epoch"]: v["ndcg10"] for v in result.validations}
    assert result.best_epoch in evaluated
    assert result.best_ndcg10 == pytest.approx(max(evaluated.values()))
    best_ens, _, meta = tr.load_checkpoint(best_path)
    assert meta["epoch"] == result.best_epoch
    assert meta["best_val_ndcg10"] == pytest.approx(result.best_ndcg10)


def test_train_history_records_schedule(small_dataset):
    ens, split, tcfg = train_setup(small_dataset, epochs=3)
    result = tr.train(ens, split, small_dataset, tcfg)
    assert [r["epoch"] for r in result.history] == [0, 1, 2]
    assert all(r["lr"] == pytest.approx(0.001) for r in result.history)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_roundtrip_bit_exact(small_dataset, tmp_path):
    ens, split, tcfg = train_setup(small_dataset, epochs=1)
    states = [tr.AdamState() for _ in ens.networks]
    tr.train_epoch(ens, split, small_dataset, tcfg, 0, states)
    path = tmp_path / "ck.npz"
    tr.save_checkpoint(path, ens, states, epoch=0, dataset_fingerprint="abc")
    loaded, loaded_states, meta = tr.load_checkpoint(path)
    for net_a, net_b in zip(ens.networks, loaded.networks):
        for (name, ta), (_, tb) in zip(net_a.named(), net_b.named()):
            assert np.array_equal(ta.data, tb.data), name
    for sa, sb in zip(states, loaded_states):
        assert sa.step == sb.step
        for name in sa.moments:
            np.testing.assert_array_equal(sa.moments[name][0], sb.moments[name][0])
    assert meta["dataset_fingerprint"] == "abc"
    # identical forward outputs
    seqs = np.array([[ens.config.pad_id] * (ens.config.max_len - 2) + [0, 1]])
    h1 = enc.encode(ens.networks[0], seqs, ens.config).data
    h2 = enc.encode(loaded.networks[0], seqs, loaded.config).data
    assert np.array_equal(h1, h2)


def test_checkpoint_resume_continues_schedule(small_dataset, tmp_path):
    # one uninterrupted 4-epoch run vs 2 epochs, checkpoint, resume for 2
    ens_a, split, _ = train_setup(small_dataset, epochs=4, seed=21)
    tcfg4 = tr.TrainConfig(epochs=4, seed=21, batch_size=16, eval_every=10,
                           decay_period=2, decay_factor=0.5)
    result_a = tr.train(ens_a, split, small_dataset, tcfg4)

    ens_b, _, _ = train_setup(small_dataset, epochs=4, seed=21)
    states_b = [tr.AdamState() for _ in ens_b.networks]
    tcfg2 = tr.TrainConfig(epochs=2, seed=21, batch_size=16, eval_every=10,
                           decay_period=2, decay_factor=0.5)
    tr.train(ens_b, split, small_dataset, tcfg2, adam_states=states_b)
    path = tmp_path / "mid.npz"
    tr.save_checkpoint(path, ens_b, states_b, epoch=1)
    resumed, resumed_states, meta = tr.load_checkpoint(path)
    result_b = tr.train(resumed, split, small_dataset, tcfg4,
                        adam_states=resumed_states,
                        start_epoch=meta["epoch"] + 1)
    assert [r["lr"] for r in result_b.history] == \
           [r["lr"] for r in result_a.history[2:]]
    for net_a, net_b in zip(ens_a.networks, resumed.networks):
        for (name, ta), (_, tb) in zip(net_a.named(), net_b.named()):
            np.testing.assert_allclose(ta.data, tb.data, atol=1e-12,
                                       err_msg=name)


def test_checkpoint_rejects_corrupt_file(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        tr.load_checkpoint(path)


def test_checkpoint_rejects_wrong_format(small_dataset, tmp_path):
    ens, _, _ = train_setup(small_dataset, epochs=1)
    path = tmp_path / "ck.npz"
    tr.save_checkpoint(path, ens)
    import numpy as _np
    with _np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["format"] = 99
    arrays["__meta__"] = _np.frombuffer(json.dumps(meta).encode(), dtype=_np.uint8)
    _np.savez(path, **arrays)
    with pytest.raises(CheckpointError):
        tr.load_checkpoint(path)
