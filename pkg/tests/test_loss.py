import math

import numpy as np
import pytest

from detar import geom, gradcheck
from detar import loss as L
from detar import tensor as T
from detar.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.precision(np.float64):
        yield


def instance(rng, b=2, n=6):
    r = np.stack([geom.random_rotation(rng) for _ in range(b)])
    t = rng.normal(size=(b, 3))
    x = rng.normal(size=(b, n, 3))
    y = np.einsum("bij,bnj->bni", r, x) + t[:, None]
    mask = (rng.random((b, n)) < 0.6).astype(float)
    y = np.where(mask[..., None] > 0, y, rng.normal(size=y.shape) * 3)
    return x, y, mask, r, t


def test_trans_loss_values():
    assert L.trans_loss(Tensor(np.ones((2, 3))), np.ones((2, 3))).data == 0
    assert L.trans_loss(Tensor([[1.0, 0, 0]]), np.zeros((1, 3))).data == 1
    v = L.trans_loss(Tensor([[3.0, 4, 0], [0, 0, 1]]), np.zeros((2, 3))).data
    assert v == pytest.approx(3.0)


def test_trans_loss_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        tgt = rng.normal(size=(3, 3))
        f = lambda t: L.trans_loss(t, tgt)  # noqa: E731
        assert gradcheck.check(f, [Tensor(rng.normal(size=(3, 3)))], seed=seed) < 1e-6


def test_cls_loss_values():
    lab = np.array([[1, 0, 1, 0, 0, 1.0]])
    good = Tensor(np.where(lab > 0, 20.0, -20.0)[..., None])
    assert L.cls_loss(good, lab).data < 1e-6
    zero = Tensor(np.zeros((1, 6, 1)))
    assert L.cls_loss(zero, lab).data == pytest.approx(math.log(2), abs=1e-12)
    # imbalanced classes: still ln 2 with balancing
    assert L.cls_loss(zero, np.array([[1, 0, 0, 0, 0, 0.0]])).data == pytest.approx(math.log(2), abs=1e-12)


def test_balance_weights():
    w = L.balance_weights(np.array([[1, 0, 0, 0], [1, 1, 1, 1]]))
    np.testing.assert_allclose(w[0], [2, 2 / 3, 2 / 3, 2 / 3])
    np.testing.assert_allclose(w[1], 1)
    # equal total mass per class
    assert w[0, :1].sum() == pytest.approx(w[0, 1:].sum())


def test_cls_loss_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        lab = (rng.random((2, 7)) < 0.3).astype(float)
        f = lambda z: L.cls_loss(z, lab)  # noqa: E731
        assert gradcheck.check(f, [Tensor(rng.normal(size=(2, 7, 1)) * 2)], seed=seed) < 1e-6


def test_align_loss_values():
    rng = np.random.default_rng(0)
    x, y, mask, r, t = instance(rng)
    assert L.align_loss(x, y, mask, r, Tensor(t)).data == pytest.approx(0, abs=1e-12)
    assert L.align_loss(x, y, np.zeros_like(mask), r, Tensor(t)).data == 0


def test_align_loss_hand_instance():
    x = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 2, 0]]])
    y = np.array([[[1.0, 0, 0], [1, 1, 0], [0, 0, 5]]])
    m = np.array([[1.0, 1, 0]])
    r = np.eye(3)[None]
    t = Tensor(np.zeros((1, 3)))
    # residuals 1, 1 (masked third ignored) averaged over N = 3
    assert L.align_loss(x, y, m, r, t).data == pytest.approx(2 / 3, abs=1e-14)


def test_align_loss_ignores_outlier_coordinates():
    rng = np.random.default_rng(1)
    x, y, mask, r, t = instance(rng)
    t_est = Tensor(t + 0.1)
    a = L.align_loss(x, y, mask, r, t_est).data
    y2 = np.where(mask[..., None] > 0, y, rng.normal(size=y.shape))
    x2 = np.where(mask[..., None] > 0, x, rng.normal(size=x.shape))
    assert L.align_loss(x2, y2, mask, r, t_est).data == a


def test_align_loss_gradient_wrt_t_and_r():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y, mask, r, t = instance(rng)
        f = lambda tt: L.align_loss(x, y, mask, r, tt)  # noqa: E731
        assert gradcheck.check(f, [Tensor(t + rng.normal(size=t.shape) * 0.2)], seed=seed) < 1e-6
        g = lambda rr, tt: L.align_loss(x, y, mask, rr, tt)  # noqa: E731
        ins = [Tensor(r + rng.normal(size=r.shape) * 0.05), Tensor(t + 0.1)]
        assert gradcheck.check(g, ins, seed=seed) < 1e-6


def test_drift_loss_values_and_k1_reduction():
    rng = np.random.default_rng(2)
    x, y, mask, r, t = instance(rng)
    assert L.drift_loss(x, y, mask, r, [Tensor(t)] * 3).data == pytest.approx(0, abs=1e-12)
    t1 = Tensor(t + rng.normal(size=t.shape))
    assert L.drift_loss(x, y, mask, r, [t1]).data == L.align_loss(x, y, mask, r, t1).data
    with pytest.raises(ValueError):
        L.drift_loss(x, y, mask, r, [])


def test_drift_loss_hand_instance():
    x = np.zeros((1, 2, 3))
    y = np.array([[[1.0, 0, 0], [0, 0, 0]]])
    m = np.ones((1, 2))
    ts = [Tensor([[0.0, 0, 0]]), Tensor([[1.0, 0, 0]])]
    # layer 1: (1 + 0)/2; layer 2: (0 + 1)/2; mean 0.5
    assert L.drift_loss(x, y, m, np.eye(3)[None], ts).data == pytest.approx(0.5, abs=1e-15)


def test_drift_loss_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y, mask, r, t = instance(rng)
        f = lambda a, b, c: L.drift_loss(x, y, mask, r, [a, b, c])  # noqa: E731
        ins = [Tensor(t + rng.normal(size=t.shape) * 0.3) for _ in range(3)]
        assert gradcheck.check(f, ins, seed=seed) < 1e-6


def test_total_loss_values():
    zero = {k: Tensor(0.0) for k in ("trans", "cls", "align", "drift")}
    assert L.total_loss(zero, L.LossWeights()).data == 0
    ones = {k: Tensor(1.0) for k in ("trans", "cls", "align", "drift")}
    assert L.total_loss(ones, L.LossWeights()).data == pytest.approx(4.05, abs=1e-12)


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(3)
    lw = L.LossWeights(2, 1, 1, 0.05)
    x, y, mask, r, t = instance(rng)
    tt = Tensor(t + 0.2, requires_grad=True)

    def parts():
        return {"trans": L.trans_loss(tt, t), "align": L.align_loss(x, y, mask, r, tt),
                "drift": L.drift_loss(x, y, mask, r, [tt, T.scale(tt, 0.5)]),
                "cls": L.cls_loss(T.reshape(T.mean(tt), (1, 1, 1)), np.array([[1.0]]))}

    grads = {}
    for k in ("trans", "cls", "align", "drift"):
        tt.grad = None
        T.backward(parts()[k])
        grads[k] = tt.grad.copy()
    tt.grad = None
    T.backward(L.total_loss(parts(), lw))
    ref = 2 * grads["trans"] + grads["cls"] + grads["align"] + 0.05 * grads["drift"]
    np.testing.assert_allclose(tt.grad, ref, rtol=1e-14, atol=1e-15)
    assert gradcheck.check(lambda a: L.total_loss({"trans": L.trans_loss(a, t),
                                                   "align": L.align_loss(x, y, mask, r, a)}, lw),
                           [Tensor(t + 0.3)]) < 1e-6


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(-1, 1, 1, 1)
    with pytest.raises(ValueError):
        L.LossWeights(float("nan"), 1, 1, 1)
    assert L.LossWeights.parse("0,1,0,0") == L.LossWeights(0, 1, 0, 0)


def test_losses_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, y, mask, r, t = instance(rng)
        tt = Tensor(rng.normal(size=t.shape))
        assert L.align_loss(x, y, mask, r, tt).data >= 0
        assert L.trans_loss(tt, t).data >= 0
        assert L.cls_loss(Tensor(rng.normal(size=mask.shape + (1,))), mask).data >= 0
