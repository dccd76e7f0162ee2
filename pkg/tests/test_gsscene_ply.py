"""Scene assembly mappings, covariance construction, PLY round trips."""

import numpy as np
import pytest

from splatdistill import diffmath as dm
from splatdistill.exceptions import PlyParseError
from splatdistill.gsscene import (
    RawAttributes,
    assemble_scene,
    build_covariance,
    disassemble_scene,
)
from splatdistill.ply import PROPERTIES, SH_C0, export_ply, import_ply

from fdcheck import check_grads


def _raw(n, rng=None, zeros=False):
    if zeros:
        data = np.zeros((n, 14), dtype=np.float32)
    else:
        data = rng.normal(size=(n, 14)).astype(np.float32) * 0.5
    return RawAttributes.from_block(dm.tensor(data))


class TestCovariance:
    def test_identity_rotation_gives_squared_scales(self):
        cov = build_covariance([1, 0, 0, 0], [0.2, 0.3, 0.4])
        np.testing.assert_allclose(cov, np.diag([0.04, 0.09, 0.16]), atol=1e-7)

    def test_quarter_turn_about_z_swaps_xy(self):
        s2 = np.sqrt(0.5)
        cov = build_covariance([s2, 0, 0, s2], [0.2, 0.3, 0.4])
        np.testing.assert_allclose(cov, np.diag([0.09, 0.04, 0.16]), atol=1e-7)

    def test_eigenvalues_match_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(0.05, 2.0, 3)
            ev = np.sort(np.linalg.eigvalsh(build_covariance(q, s)))
            np.testing.assert_allclose(ev, np.sort(s**2), rtol=1e-5, atol=1e-8)

    def test_cholesky_succeeds_for_random_valid_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(1e-3, 1.0, 3)
            np.linalg.cholesky(build_covariance(q, s))

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(ValueError):
            build_covariance([1.0, 0.3, 0, 0], [0.1, 0.1, 0.1])


class TestAssembleScene:
    def test_zero_raw_block_gives_neutral_scene(self):
        n = 6
        init = np.random.default_rng(2).uniform(-1, 1, (n, 3)).astype(np.float32)
        scene = assemble_scene(_raw(n, zeros=True), init, scale_max=0.05)
        np.testing.assert_allclose(scene.colors.data, 0.5)
        np.testing.assert_allclose(scene.opacities.data, 0.5)
        np.testing.assert_allclose(
            scene.rotations.data, np.tile([1, 0, 0, 0], (n, 1)), atol=1e-7
        )
        np.testing.assert_allclose(scene.scales.data, 0.025, rtol=1e-5)
        np.testing.assert_array_equal(scene.positions.data, init)
        scene.validate()

    def test_scale_saturation_limits(self):
        n = 2
        raw = RawAttributes.from_block(dm.tensor(np.zeros((n, 14), np.float32)))
        raw.scale.data[0, :] = 25.0  # softplus -> large -> scale -> 0
        raw.scale.data[1, :] = -25.0  # softplus -> 0 -> scale -> s_max
        scene = assemble_scene(raw, np.zeros((n, 3)), scale_max=0.05)
        assert scene.scales.data[0].max() < 1e-8
        np.testing.assert_allclose(scene.scales.data[1], 0.05, rtol=1e-5)

    def test_round_trip_recovers_raw_away_from_saturation(self):
        rng = np.random.default_rng(3)
        n = 16
        raw = _raw(n, rng)
        # normalize raw rotation so its magnitude survives the unit map
        rq = raw.rotation.data + np.array([1, 0, 0, 0], np.float32)
        rq /= np.linalg.norm(rq, axis=1, keepdims=True)
        raw.rotation.data = rq - np.array([1, 0, 0, 0], np.float32)
        init = rng.uniform(-0.5, 0.5, (n, 3)).astype(np.float32)
        scene = assemble_scene(raw, init)
        rec = disassemble_scene(scene, init)
        np.testing.assert_allclose(rec.color.data, raw.color.data, atol=1e-4)
        np.testing.assert_allclose(rec.opacity.data, raw.opacity.data, atol=1e-4)
        np.testing.assert_allclose(rec.scale.data, raw.scale.data, atol=1e-4)
        np.testing.assert_allclose(rec.offset.data, raw.offset.data, atol=1e-4)
        np.testing.assert_allclose(rec.rotation.data, raw.rotation.data, atol=1e-4)

    def test_gradients_through_every_mapping(self):
        rng = np.random.default_rng(4)
        n = 5
        block = dm.param(rng.normal(size=(n, 14)) * 0.5, name="raw")
        init = rng.uniform(-0.5, 0.5, (n, 3)).astype(np.float32)

        def out():
            scene = assemble_scene(RawAttributes.from_block(block), init)
            flat_parts = [
                scene.positions,
                scene.colors,
                dm.reshape(scene.opacities, (n, 1)),
                scene.rotations,
                dm.mul(scene.scales, 10.0),  # scale up for comparable magnitude
            ]
            return dm.concat(flat_parts, axis=-1)

        wt = rng.normal(size=(n, 14))
        check_grads(out, [block], weights=wt, tol=2e-3)


class TestPly:
    def _scene(self, n=50, seed=5):
        rng = np.random.default_rng(seed)
        raw = _raw(n, rng)
        init = rng.uniform(-0.8, 0.8, (n, 3)).astype(np.float32)
        return assemble_scene(raw, init)

    def test_round_trip_lossless(self, tmp_path):
        scene = self._scene()
        path = tmp_path / "scene.ply"
        export_ply(scene, path)
        back = import_ply(path)
        np.testing.assert_allclose(back.positions.data, scene.positions.data,
                                   atol=1e-5)
        np.testing.assert_allclose(back.colors.data, scene.colors.data, atol=1e-5)
        np.testing.assert_allclose(back.opacities.data, scene.opacities.data,
                                   atol=1e-5)
        np.testing.assert_allclose(back.rotations.data, scene.rotations.data,
                                   atol=1e-5)
        np.testing.assert_allclose(back.scales.data, scene.scales.data,
                                   rtol=1e-5)
        back.validate()

    def test_header_layout_exact(self, tmp_path):
        scene = self._scene(n=3)
        path = tmp_path / "h.ply"
        export_ply(scene, path)
        blob = path.read_bytes()
        header, _, _ = blob.partition(b"end_header\n")
        lines = header.decode().splitlines()
        assert lines[0] == "ply"
        assert lines[1] == "format binary_little_endian 1.0"
        assert lines[2] == "element vertex 3"
        assert lines[3:] == [f"property float {p}" for p in PROPERTIES]

    def test_midgray_color_maps_to_zero_dc(self, tmp_path):
        scene = self._scene(n=4)
        scene.colors.data[:] = 0.5
        scene.opacities.data[:] = 0.5
        path = tmp_path / "g.ply"
        export_ply(scene, path)
        blob = path.read_bytes()
        _, _, payload = blob.partition(b"end_header\n")
        rec = np.frombuffer(payload, dtype="<f4").reshape(4, 17)
        np.testing.assert_allclose(rec[:, 6:9], 0.0, atol=1e-6)  # f_dc
        np.testing.assert_allclose(rec[:, 9], 0.0, atol=1e-6)  # opacity logit

    def test_wrong_property_named_in_error(self, tmp_path):
        scene = self._scene(n=2)
        path = tmp_path / "bad.ply"
        export_ply(scene, path)
        txt = path.read_bytes().replace(b"property float f_dc_1", b"property float foo")
        bad = tmp_path / "bad2.ply"
        bad.write_bytes(txt)
        with pytest.raises(PlyParseError, match="f_dc_1"):
            import_ply(bad)

    def test_truncated_payload_detected(self, tmp_path):
        scene = self._scene(n=10)
        path = tmp_path / "t.ply"
        export_ply(scene, path)
        blob = path.read_bytes()
        (tmp_path / "t2.ply").write_bytes(blob[:-40])
        with pytest.raises(PlyParseError, match="truncated"):
            import_ply(tmp_path / "t2.ply")

    def test_large_scene_round_trip(self, tmp_path):
        scene = self._scene(n=100_000, seed=6)
        path = tmp_path / "big.ply"
        export_ply(scene, path)
        back = import_ply(path)
        assert back.count == 100_000
        np.testing.assert_allclose(back.positions.data, scene.positions.data,
                                   atol=1e-5)
