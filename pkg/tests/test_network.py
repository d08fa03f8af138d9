import numpy as np
import pytest

from cdhwr import ctc
from cdhwr import tensor as tn
from cdhwr.network import (Checkpoint, HWRCNet, HwrcnetConfig, LstmCell, bilstm_forward,
                           load_checkpoint, model_forward, save_checkpoint, tiny_config)
from cdhwr.selftest import network_grad_error
from cdhwr.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def full_model():
    return HWRCNet(seed=0, dtype=np.float32)


def test_full_geometry(full_model):
    x = np.random.default_rng(0).uniform(size=(2, 128, 32)).astype(np.float32)
    feats = full_model.cnn_forward(x)
    assert feats.shape == (2, 32, 256)
    lp = model_forward(x, full_model)
    assert lp.shape == (2, 32, 80)
    assert np.abs(np.logaddexp.reduce(lp.data.astype(np.float64), axis=-1)).max() < 1e-5
    assert full_model.cnn_forward(x[0]).shape == (32, 256)


def test_parameter_count(full_model):
    # conv: 5*5*1*32+32, 5*5*32*64+64, 3*3*64*128+128, 3*3*128*128+128, 3*3*128*256+256
    conv = 832 + 51264 + 73856 + 147584 + 295168
    bn = 2 * 128
    lstm = 2 * (256 * 1024 + 256 * 1024 + 1024)
    proj = 512 * 80 + 80
    assert full_model.parameter_count == conv + bn + lstm + proj == 1_660_624


def test_bad_input_shape_rejected(full_model):
    with pytest.raises(ShapeError):
        full_model.forward(np.zeros((1, 32, 128), np.float32))


@pytest.mark.parametrize("pools", [((2, 2), (2, 2), (1, 2), (1, 2), (1, 1)),
                                   ((2, 2), (2, 2), (1, 2), (1, 2), (1, 4)),
                                   ((3, 2), (2, 2), (1, 2), (1, 2), (1, 2))])
def test_geometry_violations_rejected_at_construction(pools):
    with pytest.raises(ValueError):
        HwrcnetConfig(pools=pools)


def test_time_steps_and_collapse():
    assert HwrcnetConfig().time_steps == 32
    assert tiny_config().time_steps == 8


def test_zero_input_zero_features():
    model = HWRCNet(tiny_config(), seed=1, dtype=np.float64)
    feats = model.cnn_forward(np.zeros((2, 16, 8)), training=False)
    assert not feats.data.any()


def test_one_pixel_changes_output():
    model = HWRCNet(tiny_config(), seed=2, dtype=np.float64)
    x = np.random.default_rng(3).uniform(size=(1, 16, 8))
    y = x.copy()
    y[0, 7, 3] += 0.5
    assert not np.array_equal(model.forward(x).data, model.forward(y).data)


def test_eval_forward_is_pure():
    model = HWRCNet(tiny_config(), seed=4, dtype=np.float64)
    x = np.random.default_rng(5).uniform(size=(3, 16, 8))
    np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)


def test_training_forward_updates_running_stats():
    model = HWRCNet(tiny_config(), seed=6, dtype=np.float64)
    before = model.bn.running_mean.copy()
    model.forward(np.random.default_rng(7).uniform(size=(2, 16, 8)), training=True)
    assert not np.array_equal(before, model.bn.running_mean)


def _cell(rng, f, h, scale=0.5):
    return LstmCell(Tensor(rng.normal(size=(f, 4 * h)) * scale),
                    Tensor(rng.normal(size=(h, 4 * h)) * scale),
                    Tensor(rng.normal(size=4 * h) * scale))


def test_bilstm_zero_features_zero_params():
    z = LstmCell(Tensor(np.zeros((6, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))
    out = bilstm_forward(np.zeros((5, 6)), z, z)
    assert out.shape == (5, 6) and not out.data.any()


def test_bilstm_shape_full_size():
    rng = np.random.default_rng(8)
    fw, bw = _cell(rng, 256, 256, 0.05), _cell(rng, 256, 256, 0.05)
    assert bilstm_forward(rng.normal(size=(32, 256)), fw, bw).shape == (32, 512)


def test_bilstm_reversal_symmetry():
    rng = np.random.default_rng(9)
    cell = _cell(rng, 4, 3)
    x = rng.normal(size=(7, 4))
    out = bilstm_forward(x, cell, cell).data
    rev = bilstm_forward(x[::-1].copy(), cell, cell).data
    swapped = np.concatenate([out[::-1, 3:], out[::-1, :3]], axis=1)
    np.testing.assert_allclose(rev, swapped, atol=1e-12)


def test_bilstm_rejects_feature_mismatch():
    cell = _cell(np.random.default_rng(10), 4, 3)
    with pytest.raises(ShapeError):
        bilstm_forward(np.zeros((5, 6)), cell, cell)


def test_end_to_end_gradient_scaled_down_network():
    with tn.precision(np.float64):
        model = HWRCNet(tiny_config(), seed=11, dtype=np.float64)
        rng = np.random.default_rng(12)
        x = rng.uniform(-1, 1, (2, 16, 8))
        err = network_grad_error(model, x, [[0, 1, 2], [3, 3]], rng, coords_per_param=5)
    assert err < 1e-4


def test_gradient_through_input():
    with tn.precision(np.float64):
        model = HWRCNet(tiny_config(), seed=13, dtype=np.float64)
        err = tn.grad_check(lambda t: ctc.ctc_loss_batch(model.forward(t, training=True), [[1, 2], [4]]),
                            np.random.default_rng(14).uniform(size=(2, 16, 8)),
                            coords=np.arange(0, 256, 17))
    assert err < 1e-4


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = HWRCNet(tiny_config(num_classes=5), seed=15, dtype=np.float32)
    x = np.random.default_rng(16).uniform(size=(3, 16, 8)).astype(np.float32)
    model.forward(x, training=True)  # move the running statistics off their defaults
    before = model.forward(x).data
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(model, "abcd", 7, None, {"input_mode": "dct4"}))
    assert path.read_bytes()[:4] == b"HWRC"
    back = load_checkpoint(path)
    assert back.vocab == "abcd" and back.step == 7 and back.meta["input_mode"] == "dct4"
    assert back.model.config == model.config
    np.testing.assert_array_equal(back.model.forward(x).data, before)
    for name, arr in model.state_arrays().items():
        np.testing.assert_array_equal(back.model.state_arrays()[name], arr)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(path)
