import numpy as np
import pytest
from conftest import model_gradient_error
from hypothesis import given, settings
from hypothesis import strategies as st

from surroforge import tensor as T
from surroforge.errors import InvalidSpec, ShapeError
from surroforge.models import (
    ModelSpec,
    build,
    checkpoint_bytes,
    load_checkpoint,
    model_avg,
    model_from_bytes,
    param_shapes,
    parameter_count,
    save_checkpoint,
    se_block,
)
from surroforge.tensor import Tape, Tensor

FC50 = ModelSpec("fully_connected", 50, hidden_units=20)
SMALL_1D = ModelSpec("unet1d", 64, base_channels=4, se_enabled=True, se_reduction=2)
SMALL_2D = ModelSpec("unet2d", 64, base_channels=4, depth=2)


def test_fc50_parameter_count():
    # 50*20 + 20 + 20*50 + 50
    assert parameter_count(FC50) == 2070
    assert build(FC50).n_params == 2070


def test_fc200_parameter_count():
    assert parameter_count(ModelSpec("fully_connected", 200, hidden_units=200)) == 2 * 200 * 200 + 400


def test_unet1d_parameter_formula():
    spec = ModelSpec("unet1d", 1000)
    c = [16, 32, 64, 128]
    enc = sum(3 * cin * co + co + 3 * co * co + co for cin, co in zip([1, 16, 32], c[:3]))
    bott = 3 * 64 * 128 + 128 + 3 * 128 * 128 + 128
    dec = sum(3 * c[i + 1] * c[i] + c[i] + 3 * 2 * c[i] * c[i] + c[i] + 3 * c[i] * c[i] + c[i] for i in range(3))
    head = 16 + 1
    assert parameter_count(spec) == enc + bott + dec + head


def test_se_adds_bottleneck_weights():
    plain = parameter_count(ModelSpec("unet1d", 64, base_channels=16))
    se = parameter_count(ModelSpec("unet1d", 64, base_channels=16, se_enabled=True, se_reduction=8))
    # SE after each of 3 encoder and 3 decoder blocks, C -> C/8 -> C
    per_block = [2 * c * (c // 8) + c // 8 + c for c in (16, 32, 64)]
    assert se - plain == 2 * sum(per_block)


def test_parameter_names_are_pure_function_of_spec():
    assert [n for n, _ in param_shapes(SMALL_1D)] == list(build(SMALL_1D, 5).params)


@pytest.mark.parametrize("kw", [
    dict(kind="lstm", window_len=10),
    dict(kind="fully_connected", window_len=10, hidden_units=0),
    dict(kind="unet1d", window_len=1001),
    dict(kind="unet2d", window_len=1000),
    dict(kind="unet2d", window_len=36),
])
def test_invalid_specs(kw):
    with pytest.raises(InvalidSpec):
        build(ModelSpec(**kw))


def test_spec_dict_roundtrip_and_unknown_fields():
    assert ModelSpec.from_dict(SMALL_1D.to_dict()) == SMALL_1D
    with pytest.raises(InvalidSpec):
        ModelSpec.from_dict({"kind": "unet1d", "window_len": 8, "width": 3})


@pytest.mark.parametrize("spec", [FC50, SMALL_1D, SMALL_2D])
def test_build_deterministic(spec):
    a, b = build(spec, 11), build(spec, 11)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(build(spec, 12))


def test_glorot_bounds_and_zero_bias():
    m = build(ModelSpec("fully_connected", 50, hidden_units=20), 0)
    w = m.params["fc1.weight"].data
    bound = np.sqrt(6 / 70)
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert not m.params["fc1.bias"].data.any()


@pytest.mark.parametrize("spec", [FC50, SMALL_1D, SMALL_2D, ModelSpec("unet2d", 1024, base_channels=2)])
def test_shape_preserved(spec):
    m = build(spec, 0)
    x = np.random.default_rng(0).normal(size=(3, spec.window_len))
    assert m.predict(x).shape == x.shape


def test_full_size_unet1d_shape_and_bottleneck():
    spec = ModelSpec("unet1d", 1000, base_channels=2)
    out = build(spec, 0)(Tensor(np.ones((1, 1000))))
    assert out.shape == (1, 1000)
    lengths = {n.shape[-1] for n in Tape(T.mse_loss(out, Tensor(np.zeros((1, 1000))))).nodes
               if n._op == "maxpool1d"}
    assert min(lengths) == 125


def test_window_length_mismatch():
    with pytest.raises(ShapeError):
        build(FC50)(Tensor(np.zeros((1, 49))))


def test_fc_zero_weights_zero_output():
    m = build(FC50)
    for p in m.params.values():
        p.data[...] = 0.0
    assert not m.predict(np.ones((2, 50))).any()


def test_fc_identity_reproduces_nonnegative_input():
    spec = ModelSpec("fully_connected", 8, hidden_units=8)
    m = build(spec)
    m.params["fc1.weight"].data[...] = np.eye(8)
    m.params["out.weight"].data[...] = np.eye(8)
    x = np.abs(np.random.default_rng(1).normal(size=(4, 8)))
    np.testing.assert_array_equal(m.predict(x), x)


@pytest.mark.parametrize("spec", [SMALL_1D, SMALL_2D])
def test_zero_head_zero_output(spec):
    m = build(spec, 3)
    m.params["head.weight"].data[...] = 0.0
    x = np.random.default_rng(2).normal(size=(2, spec.window_len))
    assert not m.predict(x).any()


@pytest.mark.parametrize("name", ["fc50", "unet1d-se", "unet2d"])
def test_model_gradients_single_seed(name):
    assert model_gradient_error(name, seed=100) < 1e-4


# -- squeeze-and-excitation -------------------------------------------------------

def _se_params(c, hidden, rng, zero_excite=False):
    w1 = rng.normal(size=(c, hidden))
    w2 = np.zeros((hidden, c)) if zero_excite else rng.normal(size=(hidden, c))
    return Tensor(w1), Tensor(rng.normal(size=hidden)), Tensor(w2), Tensor(np.zeros(c))


def test_se_zero_excitation_halves():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 10))
    out = se_block(Tensor(x), *_se_params(4, 2, rng, zero_excite=True)).data
    np.testing.assert_array_equal(out, 0.5 * x)


def test_se_squeeze_constant_channel():
    x = Tensor(np.full((1, 3, 7), 2.25))
    np.testing.assert_array_equal(T.global_avg_pool(x).data, [[2.25, 2.25, 2.25]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_se_gains_contract(c, r, seed, amp):
    rng = np.random.default_rng(seed)
    x = amp * rng.normal(size=(2, c, 6))
    out = se_block(Tensor(x), *_se_params(c, max(1, c // r), rng)).data
    ratio = np.divide(out, x, out=np.full_like(x, 0.5), where=x != 0)
    assert np.all((ratio >= 0) & (ratio <= 1))
    assert np.abs(out).max() <= np.abs(x).max()


# -- ensemble ---------------------------------------------------------------------

def test_model_avg_examples():
    np.testing.assert_array_equal(model_avg([[1.0, 2.0], [3.0, 4.0]]), [2.0, 3.0])
    a = np.random.default_rng(0).normal(size=16)
    assert model_avg([a, a]).tobytes() == a.tobytes()


def test_model_avg_errors():
    with pytest.raises(ShapeError):
        model_avg([[1.0, 2.0]])
    with pytest.raises(ShapeError):
        model_avg([[1.0, 2.0], [1.0]])


@given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=5, max_size=5), min_size=2, max_size=4))
def test_model_avg_matches_sequential_mean(members):
    arr = np.array(members)
    expected = arr[0].copy()
    for m in arr[1:]:
        expected = expected + m
    assert model_avg(members).tobytes() == (expected / len(arr)).tobytes()


# -- checkpoints -------------------------------------------------------------------

@pytest.mark.parametrize("spec", [FC50, SMALL_1D, SMALL_2D])
def test_checkpoint_roundtrip_bit_exact(tmp_path, spec):
    m = build(spec, 9)
    m.extra = {"fold": 2}
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    blob = path.read_bytes()
    back = load_checkpoint(path)
    assert checkpoint_bytes(back) == blob
    assert back.spec == spec and back.seed == 9 and back.extra == {"fold": 2}
    x = np.random.default_rng(3).normal(size=(2, spec.window_len))
    assert back.predict(x).tobytes() == m.predict(x).tobytes()


def test_checkpoint_layout():
    blob = checkpoint_bytes(build(FC50, 1))
    assert blob.startswith(b"SSTK1\n")
    header_end = blob.index(b"\n", 6)
    assert len(blob) - header_end - 1 == 8 * 2070


def test_checkpoint_bad_magic():
    with pytest.raises(InvalidSpec):
        model_from_bytes(b"NOPE\n{}\n")


def test_copy_is_independent():
    m = build(FC50, 1)
    c = m.copy()
    c.params["out.bias"].data[0] = 5.0
    assert m.params["out.bias"].data[0] == 0.0
