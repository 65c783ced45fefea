"""Heatmap attribution: contracts, invariances, and export formats.
(The localization experiment on trained models lives in the acceptance suite.)"""

import numpy as np
import pytest

from biqa import data as dat
from biqa import gradcam as gc
from biqa import model as mdl
from biqa.errors import NoSpatialLayer, UnknownLayer


def conv_model(seed=0, with_attention=True):
    cfg = mdl.ModelConfig(
        input_size=(16, 16),
        stream_a=mdl.BackboneSpec(stages=[mdl.StageSpec(4, convs=1), mdl.StageSpec(8, convs=1)]),
        stream_b=mdl.BackboneSpec(stages=[mdl.StageSpec(6, convs=1)]),
        enable_spatial_attention=with_attention,
        enable_channel_attention=with_attention,
        head_widths=[12, 6],
        head_dropout=[0.0, 0.0],
    )
    return mdl.build_model(cfg, seed=seed)


def rand_image(seed=0, size=16):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


class TestGradcam:
    def test_zero_model_all_zero_heatmap(self):
        m = conv_model()
        for name in m.params.names():
            if "running_var" not in name:
                m.params[name].data[...] = 0.0
        h = gc.gradcam(m, rand_image())
        assert h.values.shape == (16, 16)
        np.testing.assert_array_equal(h.values, 0.0)

    def test_contract_dims_and_range(self):
        m = conv_model(seed=1)
        h = gc.gradcam(m, rand_image(1))
        assert h.values.shape == (16, 16)
        assert h.values.min() >= 0.0
        assert h.values.max() in (0.0, pytest.approx(1.0, abs=1e-12))

    def test_default_layer_is_last_conv_of_first_stream(self):
        m = conv_model(seed=2)
        assert gc.default_target_layer(m) == "stream_a.stage1.conv0"

    def test_unknown_layer(self):
        m = conv_model(seed=3)
        with pytest.raises(UnknownLayer):
            gc.gradcam(m, rand_image(2), layer="stream_a.stage9.conv9")

    def test_no_spatial_layer(self, tmp_path):
        feat_dir = tmp_path / "f"
        feat_dir.mkdir()
        cfg = mdl.ModelConfig(
            input_size=(16, 16),
            stream_a=mdl.BackboneSpec(variant="feature_file", stages=[],
                                      feature_width=4, feature_dir=str(feat_dir)),
            enable_stream_b=False,
            head_widths=[8], head_dropout=[0.0])
        m = mdl.build_model(cfg, seed=4)
        with pytest.raises(NoSpatialLayer):
            gc.gradcam(m, rand_image(3))

    def test_invariant_to_positive_rescaling_of_output_layer(self):
        img = rand_image(4)
        base = conv_model(seed=5)
        h1 = gc.gradcam(base, img)
        base.params["head.out.w"].data *= 3.5
        h2 = gc.gradcam(base, img)
        assert np.abs(h1.values - h2.values).max() <= 1e-6

    def test_constant_raw_map_upsamples_constant(self):
        raw = np.full((4, 4), 2.0)
        up = dat.resize(raw, 16, 16)
        np.testing.assert_allclose(up, 2.0, atol=1e-12)

    def test_negated_target_flips_attribution_sign(self):
        m = conv_model(seed=6)
        img = rand_image(5)
        h_pos = gc.gradcam(m, img, sign=1.0)
        h_neg = gc.gradcam(m, img, sign=-1.0)
        assert h_pos.values.shape == h_neg.values.shape


class TestExport:
    def test_all_zero_heatmap_is_black_pgm(self, tmp_path):
        h = gc.Heatmap(np.zeros((8, 8)), "x")
        p = tmp_path / "h.pgm"
        gc.export_heatmap(h, p)
        assert (dat.read_pgm(p) == 0.0).all()

    def test_overlay_of_zero_map_halves_brightness(self, tmp_path):
        img = np.full((8, 8, 3), 0.8, dtype=np.float32)
        h = gc.Heatmap(np.zeros((8, 8)), "x")
        p = tmp_path / "h.ppm"
        gc.export_heatmap(h, p, image=img, overlay=True)
        out = dat.decode_image(p)
        np.testing.assert_allclose(out, np.round(0.4 * 255) / 255, atol=1e-7)

    def test_pgm_roundtrip_matches_quantized_map(self, tmp_path):
        rng = np.random.default_rng(6)
        vals = rng.random((5, 5))
        vals /= vals.max()
        h = gc.Heatmap(vals, "x")
        p = tmp_path / "h.pgm"
        gc.export_heatmap(h, p)
        back = dat.read_pgm(p)
        expected = np.clip(np.rint(vals * 255), 0, 255) / 255
        np.testing.assert_allclose(back, expected, atol=1e-7)


class TestQuadrantScore:
    def test_perfectly_localized_map(self):
        vals = np.zeros((16, 16))
        vals[:8, :8] = 1.0  # top-left quadrant lit
        h = gc.Heatmap(vals, "x")
        assert gc.quadrant_hit_fraction(h, "tl") == 1.0

    def test_uniform_map_matches_area_baseline(self):
        rng = np.random.default_rng(7)
        vals = rng.random((64, 64))
        h = gc.Heatmap(vals / vals.max(), "x")
        frac = gc.quadrant_hit_fraction(h, "br")
        assert abs(frac - 0.25) < 0.1
