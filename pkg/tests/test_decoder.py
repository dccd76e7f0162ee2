"""Decoder variants: dimension ledger, zero-init contract, end-to-end grads."""

import numpy as np
import pytest

from splatdistill import diffmath as dm
from splatdistill.cameras import look_at
from splatdistill.decoder import ArchVariant, SplatDecoder, decode_attributes, decode_scene
from splatdistill.rasterizer import render
from splatdistill.triplane import TriPlane

from fdcheck import numeric_grad, rel_err

F = 16


def _tp(rng, r=8):
    return TriPlane(dm.tensor(rng.normal(size=(3, r, r, F)).astype(np.float32)))


class TestArchitecture:
    def test_sequential_input_dimension_ledger(self):
        dec = SplatDecoder("sequential", F, np.random.default_rng(0))
        assert dec.input_dims() == {
            "color": F, "opacity": F + 3, "rotation": F + 4,
            "scale": F + 8, "offset": F + 11,
        }

    def test_reversed_input_dimension_ledger(self):
        dec = SplatDecoder("sequential_reversed", F, np.random.default_rng(0))
        assert dec.input_dims() == {
            "offset": F, "scale": F + 3, "rotation": F + 6,
            "opacity": F + 10, "color": F + 11,
        }

    def test_parallel_head_width_is_fourteen(self):
        dec = SplatDecoder("parallel", F, np.random.default_rng(0))
        assert dec.heads["all"].dims == [F, 128, 128, 128, 14]

    def test_heads_have_three_hidden_layers_of_128(self):
        dec = SplatDecoder("sequential", F, np.random.default_rng(0))
        for mlp in dec.heads.values():
            assert mlp.dims[1:-1] == [128, 128, 128]

    def test_zero_initialized_output_layers(self):
        rng = np.random.default_rng(1)
        dec = SplatDecoder("sequential", F, rng)
        feats = dm.tensor(rng.normal(size=(10, F)))
        raw = decode_attributes(dec, feats)
        for attr in ("color", "opacity", "rotation", "scale", "offset"):
            np.testing.assert_array_equal(getattr(raw, attr).data, 0.0)

    def test_variants_differ_on_same_features(self):
        rng = np.random.default_rng(2)
        feats = dm.tensor(rng.normal(size=(4, F)))
        outs = {}
        for variant in ArchVariant:
            dec = SplatDecoder(variant, F, np.random.default_rng(3))
            # perturb output layers so heads are not all zero
            for mlp in dec.heads.values():
                mlp.weights[-1].data[:] = np.random.default_rng(4).normal(
                    size=mlp.weights[-1].data.shape
                ) * 0.1
            raw = decode_attributes(dec, feats)
            outs[variant] = np.concatenate(
                [raw.color.data, raw.opacity.data, raw.rotation.data,
                 raw.scale.data, raw.offset.data], axis=-1,
            )
        assert not np.allclose(outs[ArchVariant.SEQUENTIAL], outs[ArchVariant.PARALLEL])
        assert not np.allclose(
            outs[ArchVariant.SEQUENTIAL], outs[ArchVariant.SEQUENTIAL_REVERSED]
        )

    def test_feature_dim_mismatch_raises(self):
        dec = SplatDecoder("sequential", F, np.random.default_rng(0))
        with pytest.raises(Exception):
            decode_attributes(dec, dm.tensor(np.zeros((3, F + 1), np.float32)))


class TestDecodeScene:
    def test_zero_offset_head_keeps_positions(self):
        rng = np.random.default_rng(5)
        dec = SplatDecoder("sequential", F, rng)
        tp = _tp(rng)
        init = rng.uniform(-0.9, 0.9, (20, 3)).astype(np.float32)
        scene = decode_scene(dec, tp, init)
        np.testing.assert_array_equal(scene.positions.data, init)

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        dec = SplatDecoder("sequential", F, rng)
        for mlp in dec.heads.values():
            mlp.weights[-1].data[:] = 0.01
        tp = _tp(rng)
        init = rng.uniform(-0.9, 0.9, (20, 3)).astype(np.float32)
        s1 = decode_scene(dec, tp, init)
        s2 = decode_scene(dec, tp, init)
        np.testing.assert_array_equal(s1.colors.data, s2.colors.data)
        np.testing.assert_array_equal(s1.scales.data, s2.scales.data)

    def test_per_splat_locality_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        dec = SplatDecoder("parallel", F, rng)
        dec.heads["all"].weights[-1].data[:] = rng.normal(size=(128, 14)) * 0.05
        tp = _tp(rng)
        init = rng.uniform(-0.9, 0.9, (15, 3)).astype(np.float32)
        perm = rng.permutation(15)
        s1 = decode_scene(dec, tp, init)
        s2 = decode_scene(dec, tp, init[perm])
        np.testing.assert_allclose(s1.colors.data[perm], s2.colors.data, atol=1e-6)
        np.testing.assert_allclose(s1.scales.data[perm], s2.scales.data, atol=1e-6)

    def test_end_to_end_pixel_gradient_wrt_color_head_weight(self):
        rng = np.random.default_rng(8)
        dec = SplatDecoder("sequential", F, rng)
        for mlp in dec.heads.values():
            mlp.weights[-1].data[:] = rng.normal(size=mlp.weights[-1].data.shape) * 0.05
        # lift opacities so splats contribute strongly (better FD signal)
        dec.heads["opacity"].biases[-1].data[:] = 1.0
        tp = _tp(rng)
        init = rng.uniform(-0.3, 0.3, (10, 3)).astype(np.float32)
        cam = look_at(eye=(0, 0, -2.0), target=(0, 0, 0), fov_y_deg=30.0,
                      width=12, height=12, near=0.5, far=8.0)
        wt = rng.normal(size=(12, 12, 3)).astype(np.float32)
        target = dec.heads["color"].weights[1]

        def run():
            scene = decode_scene(dec, tp, init, scale_max=0.4)
            img, _ = render(scene, cam, bg=(1, 1, 1))
            return img

        target.grad = None
        with dm.Tape() as tape:
            loss = dm.mean_all(dm.mul(run(), dm.tensor(wt)))
        tape.backward(loss)
        analytic = target.grad.copy()

        idx = rng.choice(target.data.size, size=64, replace=False)
        num = numeric_grad(
            lambda: (run().data.astype(np.float64) * wt).mean(), target,
            h=2e-3, indices=idx,
        )
        mask = np.zeros(target.data.size, dtype=bool)
        mask[idx] = True
        assert rel_err(analytic.reshape(-1)[mask], num.reshape(-1)[mask]) < 1e-2
