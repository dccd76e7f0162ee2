"""Adam optimizer behavior and checkpoint round trips."""

import numpy as np
import pytest

from splatdistill import diffmath as dm
from splatdistill.exceptions import CheckpointError, GradError


def test_adam_zero_grad_leaves_param_unchanged():
    p = dm.param(np.array([1.0, -2.0]), name="p")
    st = dm.AdamState.for_param(p, lr=0.1)
    p.grad = np.zeros(2, dtype=np.float32)
    dm.adam_step(p, st)
    np.testing.assert_allclose(p.data, [1.0, -2.0])
    assert st.step == 1


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step: m_hat = g, v_hat = g^2, so step = lr * sign(g)
    p = dm.param(np.array([1.0]), name="p")
    st = dm.AdamState.for_param(p, lr=0.1)
    p.grad = np.array([1.0], dtype=np.float32)
    dm.adam_step(p, st)
    assert p.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)
    assert p.grad is None


def test_adam_missing_grad_raises():
    p = dm.param(np.array([1.0]))
    st = dm.AdamState.for_param(p, lr=0.1)
    with pytest.raises(GradError):
        dm.adam_step(p, st)


def test_adam_minimizes_quadratic():
    p = dm.param(np.array([1.0]), name="p")
    opt = dm.Adam([p], lr=0.05)
    for _ in range(500):
        with dm.Tape() as t:
            loss = dm.sum_all(dm.square(p))
        t.backward(loss)
        opt.step()
    assert abs(p.data[0]) < 1e-2


def test_adam_deterministic_given_state_and_grads():
    def run():
        p = dm.param(np.array([0.7, -0.3]))
        st = dm.AdamState.for_param(p, lr=0.01)
        for k in range(20):
            p.grad = np.array([0.1 * k, -0.05], dtype=np.float32)
            dm.adam_step(p, st)
        return p.data.copy()

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "plane_xy": rng.normal(size=(8, 8, 4)).astype(np.float32),
        "head.w0": rng.normal(size=(16, 64)).astype(np.float32),
        "scalar": np.array(3.5, dtype=np.float32),
    }
    path = tmp_path / "ck.gdck"
    dm.save_checkpoint(path, tensors)
    loaded = dm.load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_layout_is_exact(tmp_path):
    path = tmp_path / "ck.gdck"
    dm.save_checkpoint(path, {"ab": np.array([1.0, 2.0], dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:4] == b"GDCK"
    import struct

    version, count = struct.unpack_from("<II", blob, 4)
    assert (version, count) == (1, 1)
    nlen = struct.unpack_from("<I", blob, 12)[0]
    assert nlen == 2 and blob[16:18] == b"ab"
    rank = struct.unpack_from("<I", blob, 18)[0]
    dims = struct.unpack_from("<I", blob, 22)
    assert rank == 1 and dims == (2,)
    vals = np.frombuffer(blob, dtype="<f4", count=2, offset=26)
    np.testing.assert_array_equal(vals, [1.0, 2.0])
    assert len(blob) == 26 + 8


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.gdck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        dm.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "trunc.gdck"
    dm.save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        dm.load_checkpoint(path)
