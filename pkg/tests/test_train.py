import dataclasses

import numpy as np
import pytest

from detar import data, nn, train
from detar import loss as L
from detar import tensor as T
from detar.tensor import Tensor


def small_cfg(**kw):
    base = dict(k_cfd=2, m_sca=1, channels=8, groups=2, n_corr=32)
    base.update(kw)
    return nn.DetarConfig(**base)


@pytest.fixture(scope="module")
def small_sets():
    spec = data.GenSpec(n_corr=32)
    return [data.generate(dataclasses.replace(spec, inlier_ratio=0.3 + 0.1 * (i % 5)), 300 + i) for i in range(16)]


def test_adam_zero_gradients():
    p = {"a": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["a"].grad = np.zeros(2)
    st = train.adam_step(p, train.AdamState())
    assert st.step == 1 and np.array_equal(p["a"].data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    for scale in (1e-3, 1.0, 1e6):
        p = {"a": Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)}
        p["a"].grad = np.array([1.0, -1.0, 2.0]) * scale
        train.adam_step(p, train.AdamState(lr=1e-3))
        np.testing.assert_allclose(np.abs(p["a"].data), 1e-3, rtol=1e-4)


def test_adam_converges_on_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    st = train.AdamState(lr=0.1)
    for _ in range(200):
        x.grad = 2 * (x.data - 3)
        train.adam_step({"x": x}, st)
    assert abs(x.data[0] - 3) < 1e-2


def test_adam_rejects_non_finite_without_touching_params():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2)
    b.grad = np.array([1.0, np.nan])
    st = train.AdamState()
    with pytest.raises(train.TrainingError, match="'b'"):
        train.adam_step({"a": a, "b": b}, st)
    assert np.array_equal(a.data, np.ones(2)) and st.step == 0


def test_train_determinism_bit_identical(tmp_path, small_sets):
    tc = train.TrainConfig(epochs=10, batch_size=4, seed=42, max_steps=10)
    paths = []
    for k in range(2):
        ck, _ = train.train_loop(small_sets, small_cfg(), tc=tc)
        assert ck.step == 10
        paths.append(tmp_path / f"{k}.dtrn")
        train.save_checkpoint(paths[-1], ck)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoint_roundtrip_inference(tmp_path, small_sets):
    ck, _ = train.train_loop(small_sets, small_cfg(), tc=train.TrainConfig(epochs=1, batch_size=8, seed=1))
    train.save_checkpoint(tmp_path / "m.dtrn", ck)
    back = train.load_checkpoint(tmp_path / "m.dtrn")
    assert back.step == ck.step and back.config == ck.config and back.adam.step == ck.adam.step
    a = train.predict(ck.net(), small_sets[:4])
    b = train.predict(back.net(), small_sets[:4])
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    train.save_checkpoint(tmp_path / "n.dtrn", back)
    assert (tmp_path / "m.dtrn").read_bytes() == (tmp_path / "n.dtrn").read_bytes()


def test_checkpoint_errors(tmp_path, small_sets):
    ck = train.Checkpoint(small_cfg(), nn.init_params(small_cfg(), 0))
    p = tmp_path / "c.dtrn"
    train.save_checkpoint(p, ck)
    raw = p.read_bytes()
    bad = tmp_path / "bad.dtrn"
    bad.write_bytes(raw[:-7])
    with pytest.raises(train.CheckpointError, match="corrupt"):
        train.load_checkpoint(bad)
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(train.CheckpointError, match="magic"):
        train.load_checkpoint(bad)
    bad.write_bytes(raw[:4] + (train.CKPT_VERSION + 1).to_bytes(4, "little") + raw[8:])
    with pytest.raises(train.CheckpointError, match="version 2 not supported"):
        train.load_checkpoint(bad)
    bad.write_bytes(raw + b"x")
    with pytest.raises(train.CheckpointError, match="trailing"):
        train.load_checkpoint(bad)
    # params saved for one config, header claiming another
    other = train.Checkpoint(small_cfg(channels=16), nn.init_params(small_cfg(channels=16), 0))
    train.save_checkpoint(bad, other)
    mixed = bytearray(bad.read_bytes())
    hl = int.from_bytes(raw[8:12], "little")
    hl2 = int.from_bytes(mixed[8:12], "little")
    mixed = raw[:12 + hl] + bytes(mixed[12 + hl2:])
    bad.write_bytes(mixed)
    with pytest.raises(train.CheckpointError, match="shape mismatch"):
        train.load_checkpoint(bad)


def test_checkpoint_layout(tmp_path):
    ck = train.Checkpoint(small_cfg(), nn.init_params(small_cfg(), 0))
    train.save_checkpoint(tmp_path / "c.dtrn", ck)
    raw = (tmp_path / "c.dtrn").read_bytes()
    assert raw[:4] == b"DTRN" and int.from_bytes(raw[4:8], "little") == 1
    hl = int.from_bytes(raw[8:12], "little")
    import json
    header = json.loads(raw[12:12 + hl])
    assert header["config"]["channels"] == 8


def test_classifier_only_weights_freeze_translation_head(small_sets):
    cfg = small_cfg()
    init = nn.init_params(cfg, 5)
    ck, _ = train.train_loop(small_sets, cfg, weights=L.LossWeights(0, 1, 0, 0),
                             tc=train.TrainConfig(epochs=1, batch_size=8, seed=5))
    for name, p in ck.params:
        if name.startswith(("trans.", "drift")):
            assert np.array_equal(p.data, init[name].data), name
    assert not np.array_equal(ck.params["cls.out.w"].data, init["cls.out.w"].data)


def test_head_weight_decay_shrinks_only_readout_weights(small_sets):
    # classification loss only: the heads see nothing but the decay, so one Adam step moves each
    # readout weight by lr toward zero (Adam is scale-free) and leaves everything else untouched
    cfg = small_cfg()
    init = nn.init_params(cfg, 5)
    tc = train.TrainConfig(epochs=1, batch_size=16, seed=5, head_weight_decay=0.5)
    w = L.LossWeights(1e-30, 1, 0, 1e-30)
    ck, _ = train.train_loop(small_sets, cfg, weights=w, tc=tc)
    plain, _ = train.train_loop(small_sets, cfg, weights=w, tc=dataclasses.replace(tc, head_weight_decay=0.0))
    for name, p in ck.params:
        if name.startswith(("trans.", "drift")) and name.endswith(".w"):
            w0 = init[name].data
            np.testing.assert_allclose(p.data, w0 - tc.lr * np.sign(w0), atol=1e-6, err_msg=name)
        else:
            assert np.array_equal(p.data, plain.params[name].data), name


def test_training_loss_decreases():
    spec = data.GenSpec(n_corr=64)
    sets = [data.generate(dataclasses.replace(spec, inlier_ratio=0.3 + 0.1 * (i % 5)), 700 + i) for i in range(64)]
    cfg = small_cfg(n_corr=64, channels=16, k_cfd=3, m_sca=2)
    ok = 0
    for seed in range(5):
        _, hist = train.train_loop(sets, cfg, tc=train.TrainConfig(epochs=5, batch_size=16, seed=seed))
        tot = [h["total"] for h in hist]
        ok += all(b < a for a, b in zip(tot, tot[1:]))
    assert ok >= 4


def test_resume_continues_step_count(small_sets):
    tc = train.TrainConfig(epochs=1, batch_size=8, seed=2)
    ck, _ = train.train_loop(small_sets, small_cfg(), tc=tc)
    ck2, hist = train.train_loop(small_sets, small_cfg(), tc=tc, resume=ck)
    assert ck2.step == 2 * ck.step and hist[0]["epoch"] == 1


def test_non_finite_loss_stops(small_sets):
    bad = [dataclasses.replace(s) for s in small_sets[:4]]
    bad[0] = data.CorrespondenceSet(np.full((32, 3), np.inf, np.float32), bad[0].y, bad[0].labels, bad[0].gt)
    with np.errstate(all="ignore"), pytest.raises((train.TrainingError, ValueError)):
        train.train_loop(bad, small_cfg(), tc=train.TrainConfig(epochs=1, batch_size=4))


def test_lr_schedule_and_clip(small_sets):
    tc = train.TrainConfig(epochs=1, batch_size=8, lr_schedule="cosine", clip_norm=0.5)
    ck, hist = train.train_loop(small_sets, small_cfg(), tc=tc)
    assert np.isfinite(hist[0]["total"])
    assert train._lr_at(tc, 0, 10) == tc.lr and train._lr_at(tc, 10, 10) == 0
    with pytest.raises(ValueError):
        train._lr_at(dataclasses.replace(tc, lr_schedule="step"), 0, 1)


def test_params_finite_after_steps(small_sets):
    ck, _ = train.train_loop(small_sets, small_cfg(), tc=train.TrainConfig(epochs=2, batch_size=4))
    assert all(np.all(np.isfinite(p.data)) for _, p in ck.params)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train.train_loop([], small_cfg())


def test_quick_metrics_keys(small_sets):
    net = nn.DetarNet(small_cfg(), seed=0)
    qm = train.quick_metrics(net, small_sets[:3])
    assert len(qm["layer_te"]) == 2 and 0 <= qm["acc"] <= 100
    with T.no_grad():
        assert len(train.predict(net, small_sets[:3])["t"]) == 3


def test_head_decay_scales_drift_readouts_by_loss_share():
    cfg = small_cfg(k_cfd=4)
    p = nn.init_params(cfg, 0)
    train._head_decay(p, 0.2, L.LossWeights(trans=2.0, drift=0.4), cfg.k_cfd)
    np.testing.assert_allclose(p["trans.w"].grad, 0.2 * p["trans.w"].data)
    np.testing.assert_allclose(p["drift3.w"].grad, 0.2 * 0.4 / (4 * 2.0) * p["drift3.w"].data)
    assert p["trans.b"].grad is None and p["cls.out.w"].grad is None
