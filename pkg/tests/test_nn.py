import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clab.errors import ContractError, NumericError, UsageError
from clab.nn import tensor as T
from clab.nn.checkpoint import dumps, load, loads, save
from clab.nn.layers import Encoder, EncoderConfig
from clab.nn.optim import LrSchedule, ParamSet, Plateau, schedule_rate, sgd_step
from clab.nn.tensor import Tensor

from oracles import central_diff, rel_error

SMALL = EncoderConfig(input_shape=(4, 4, 3), hidden=(8,), feat_dim=6, proj_hidden=(8,), proj_dim=4,
                      conv_stem=False)
SMALL_STEM = EncoderConfig(input_shape=(4, 4, 2), hidden=(5,), feat_dim=4, proj_hidden=(4,),
                           proj_dim=3, conv_stem=True, stem_channels=2, stem_pool=2)


def test_tensor_rejects_zero_dimension():
    with pytest.raises(ContractError):
        Tensor(np.zeros((0, 3)))


def test_nonfinite_forward_raises():
    with pytest.raises(NumericError):
        T.mul(Tensor([1.0, np.inf]), 2.0)


def test_backward_requires_graph():
    with pytest.raises(UsageError):
        Tensor(3.0).backward()
    with pytest.raises(UsageError):
        T.tsum(Tensor(np.ones(3))).backward()


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        T.mul(w, 2.0).backward()


def test_no_grad_records_nothing():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.matmul(w, w))
    assert not y.requires_grad and y.is_leaf


def test_sum_of_matvec_matches_finite_differences():
    rng = np.random.default_rng(0)
    W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

    def f():
        return T.tsum(T.matmul(x, W)).item()

    loss = T.tsum(T.matmul(x, W))
    loss.backward()
    num_x, num_w = central_diff(f, [x.data, W.data])
    assert rel_error(x.grad, num_x) < 1e-4
    assert rel_error(W.grad, num_w) < 1e-4


def test_zero_loss_gives_zero_grads():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.tsum(T.mul(w, 0.0)).backward()
    assert np.all(w.grad == 0)


def test_accumulating_backward_doubles():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = rng.normal(size=(4, 3))
    loss = T.cross_entropy(T.matmul(Tensor(x), w), np.array([0, 1, 1, 0]))
    loss.backward()
    single = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * single)


def test_unreachable_param_gets_zero_after_zero_grad():
    enc = Encoder.init(SMALL, 0)
    enc.params.zero_grad()
    x = np.random.default_rng(0).random((2, 4, 4, 3))
    T.tsum(enc.backbone(x)).backward()
    for name in enc.params:
        assert enc.params[name].grad is not None
        if name.startswith("projector."):
            assert np.all(enc.params[name].grad == 0)


# ---------------------------------------------------------------- forward contract

def test_zero_weight_encoder_gives_zero_features():
    enc = Encoder.init(SMALL, 0)
    for t in enc.params._params.values():
        t.data = np.zeros_like(t.data)
    x = np.random.default_rng(0).random((3, 4, 4, 3))
    np.testing.assert_array_equal(enc.backbone(x).data, 0.0)


@pytest.mark.parametrize("cfg", [SMALL, SMALL_STEM, EncoderConfig()])
def test_projected_rows_are_unit_norm(cfg):
    enc = Encoder.init(cfg, 3)
    x = np.random.default_rng(4).random((5, *cfg.input_shape))
    z = enc.forward(x, "projected").data
    assert z.shape == (5, cfg.proj_dim)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_forward_is_deterministic_and_pure():
    enc = Encoder.init(SMALL_STEM, 7)
    before = enc.params.arrays()
    x = np.random.default_rng(5).random((3, 4, 4, 2))
    a = enc.forward(x, "projected").data
    b = Encoder.init(SMALL_STEM, 7).forward(x, "projected").data
    np.testing.assert_array_equal(a, b)
    for k, v in enc.params.arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_forward_shape_mismatch():
    enc = Encoder.init(SMALL, 0)
    with pytest.raises(ContractError):
        enc.forward(np.zeros((2, 5, 4, 3)))
    with pytest.raises(ContractError):
        enc.forward(np.zeros((2, 4, 4, 3)), "logits")


# ---------------------------------------------------------------- optimizer

def _scalar_params(value, grad):
    p = ParamSet({"w": Tensor(np.array([value]), requires_grad=True)})
    p["w"].grad = np.array([grad])
    return p


def test_sgd_lr_zero_is_noop():
    p = _scalar_params(1.5, 3.0)
    sgd_step(p, 0.0, momentum=0.9, weight_decay=1e-4)
    assert p["w"].data[0] == 1.5
    assert p.step == 1


def test_sgd_single_step_definition():
    p = _scalar_params(1.0, 1.0)
    sgd_step(p, 0.1, momentum=0.9, weight_decay=0.0)
    assert p["w"].data[0] == pytest.approx(0.9, abs=1e-15)
    assert p.momentum["w"][0] == 1.0
    np.testing.assert_array_equal(p["w"].grad, [1.0])


def test_sgd_quadratic_recurrence():
    # f(x) = x^2 / 2, grad = x; hand-iterate v_t = 0.9 v + x, x -= 0.1 v
    p = ParamSet({"x": Tensor(np.array([1.0]), requires_grad=True)})
    x, v = 1.0, 0.0
    for _ in range(3):
        p.zero_grad()
        T.mul(T.tsum(T.mul(p["x"], p["x"])), 0.5).backward()
        sgd_step(p, 0.1, momentum=0.9)
        v = 0.9 * v + x
        x = x - 0.1 * v
        assert p["x"].data[0] == pytest.approx(x, abs=1e-15)
    # x: 1 -> 0.9 -> 0.72 -> 0.486
    assert x == pytest.approx(0.486, abs=1e-12)


def test_sgd_missing_grad():
    p = ParamSet({"w": Tensor(np.ones(2), requires_grad=True)})
    with pytest.raises(UsageError):
        sgd_step(p, 0.1)


@given(c=st.floats(0.1, 10.0), lr=st.floats(1e-3, 1.0))
def test_sgd_scale_invariance(c, lr):
    rng = np.random.default_rng(0)
    w0, g = rng.normal(size=4), rng.normal(size=4)
    a = ParamSet({"w": Tensor(w0.copy(), requires_grad=True)})
    b = ParamSet({"w": Tensor(w0.copy(), requires_grad=True)})
    a["w"].grad = g.copy()
    b["w"].grad = g * c
    sgd_step(a, lr, momentum=0.0)
    sgd_step(b, lr / c, momentum=0.0)
    np.testing.assert_allclose(a["w"].data, b["w"].data, rtol=1e-12, atol=1e-12)


def test_duplicate_param_name_rejected():
    p = ParamSet({"w": Tensor(np.ones(1))})
    with pytest.raises(ContractError):
        p.add("w", Tensor(np.ones(1)))


# ---------------------------------------------------------------- schedules

def test_cosine_endpoints():
    s = LrSchedule("cosine", 0.03, total_steps=100)
    assert schedule_rate(s, 0) == 0.03
    assert schedule_rate(s, 50) == pytest.approx(0.015, abs=1e-15)
    assert schedule_rate(s, 100) == pytest.approx(0.0, abs=1e-18)
    rates = [schedule_rate(s, t) for t in range(101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_plateau_halves_after_patience():
    s = LrSchedule("plateau", 1.0, patience=5, factor=0.5)
    losses = [1, 1, 1, 1, 1, 1]
    assert [schedule_rate(s, t, losses) for t in range(7)] == [1, 1, 1, 1, 1, 1, 0.5]


def test_plateau_improvement_resets_and_min_delta():
    s = LrSchedule("plateau", 1.0, patience=2, factor=0.5, min_delta=0.1)
    tracker = Plateau(s)
    for loss in [1.0, 0.95, 0.5, 0.45, 0.44]:
        tracker.observe(loss)
    # 0.95 is within min_delta (bad 1), 0.5 improves, 0.45 and 0.44 are bad -> one halving
    assert tracker.rate == 0.5


@given(st.lists(st.floats(0.0, 5.0), max_size=40))
def test_plateau_rate_is_power_of_factor(losses):
    s = LrSchedule("plateau", 1.0, patience=3, factor=0.5)
    r = schedule_rate(s, len(losses), losses)
    k = round(-math.log2(r))
    assert r == 0.5 ** k
    assert k <= len(losses) // 3


# ---------------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_large_margin():
    logits = np.zeros((2, 3))
    logits[0, 1] = 50
    logits[1, 2] = 50
    assert T.cross_entropy(Tensor(logits), np.array([1, 2])).item() < 1e-9


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(2, 5))
    y = np.array([3, 0])
    expected = sum(-(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(2)) / 2
    assert T.cross_entropy(Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, -1]))


# ---------------------------------------------------------------- checkpoint format

def test_checkpoint_layout_by_hand():
    buf = dumps({"ab": np.array([[1.0, 2.0]])})
    expected = (b"CLAB" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + b"ab" + (2).to_bytes(4, "little")
                + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                + np.array([1.0, 2.0], dtype="<f8").tobytes())
    assert buf == expected


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"é.weight": rng.normal(size=(3, 4)), "s": np.array(np.pi), "v": rng.normal(size=7)}
    tensors["v"][0] = -0.0
    save(tmp_path / "x.clab", tensors)
    back = load(tmp_path / "x.clab")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k])
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()
    assert dumps(back) == dumps(tensors)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ContractError):
        loads(b"NOPE")
    with pytest.raises(ContractError):
        loads(dumps({"a": np.ones(3)})[:-4])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2 ** 32 - 1))
def test_checkpoint_roundtrip_property(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape)
    assert loads(dumps({"t": arr}))["t"].tobytes() == arr.tobytes()
