import numpy as np
import pytest

from fedguard import zoo
from fedguard.fingerprint import build_registry, default_registry
from fedguard.nn.layers import Activation, Conv2d, Dense, GlobalAvgPool, MaxPool


def closed_form_param_count(net):
    """Independent sum: conv = 9*cin*cout + cout, dense = in*out + out."""
    total = 0
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            _, _, cin, cout = layer.w.shape
            total += 9 * cin * cout + cout
        elif isinstance(layer, Dense):
            n_in, n_out = layer.w.shape
            total += n_in * n_out + n_out
    return total


class TestStatic:
    def test_desk_structure_and_param_count(self, registry):
        net = zoo.build_static(256, "desk", seed=0)
        convs = [l for l in net.layers if isinstance(l, Conv2d)]
        pools = [l for l in net.layers if isinstance(l, MaxPool)]
        assert len(convs) == 8 and len(pools) == 4
        assert net.param_count() == closed_form_param_count(net)
        # 16x16 grid pools down to 1x1
        assert net.layers[0].side == 16
        shape = (256,)
        for layer in net.layers[: net.base_boundary]:
            shape = layer.output_shape(shape)
        assert shape == (32,)  # last filter count after global average pool

    def test_paper_scale_filter_sequence(self):
        net = zoo.build_static(1024, "paper", seed=0)
        filters = [l.w.shape[3] for l in net.layers if isinstance(l, Conv2d)]
        assert filters == [16, 16, 32, 32, 64, 64, 128, 128]
        dense_widths = [l.w.shape[1] for l in net.layers if isinstance(l, Dense)]
        assert dense_widths == [1024, 1024, 2]

    def test_paper_scale_structure_audit(self):
        net = zoo.build_static(1024, "paper", seed=0)
        assert sum(isinstance(l, Conv2d) for l in net.layers) == 8
        assert sum(isinstance(l, MaxPool) for l in net.layers) == 4
        tanh_count = sum(
            1 for l in net.layers if isinstance(l, Activation) and l.kind == "tanh"
        )
        assert tanh_count == 2

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            zoo.build_static(16, "desk")  # 4x4 grid cannot pool four times

    def test_base_boundary_after_global_pool(self):
        net = zoo.build_static(256, "desk")
        assert isinstance(net.layers[net.base_boundary - 1], GlobalAvgPool)


class TestHelpers:
    def test_mlp_names_enforced(self):
        with pytest.raises(ValueError):
            zoo.build_mlp_helper("HM3", 64, "desk")

    def test_cnn_names_enforced(self):
        with pytest.raises(ValueError):
            zoo.build_cnn_helper("HM1", 64, "desk")

    def test_hm1_input_width_is_sum_of_its_templates(self, registry):
        spec, net = zoo.build_model("HM1", registry, "desk")
        expected = sum(
            registry.template(n).width
            for n in ("permissions", "protection-levels", "device-features")
        )
        assert registry.width_of(spec.feature_templates) == expected
        first_dense = next(l for l in net.layers if isinstance(l, Dense))
        assert first_dense.w.shape[0] == expected

    def test_hm4_has_api_classes_but_not_sensitive_methods(self):
        templates = zoo.MODEL_TEMPLATES["HM4"]
        assert "api-classes" in templates
        assert "api-sensitive-methods" not in templates

    def test_hm6_everything_except_manifest_attributes(self):
        assert set(zoo.MODEL_TEMPLATES["HM6"]) == set(zoo.MODEL_TEMPLATES["Static"]) - {
            "manifest-attributes"
        }

    def test_hm3_width(self, registry):
        spec, _ = zoo.build_model("HM3", registry, "desk")
        expected = sum(
            registry.template(n).width
            for n in (
                "permissions",
                "protection-levels",
                "device-features",
                "api-classes",
                "api-sensitive-methods",
            )
        )
        assert registry.width_of(spec.feature_templates) == expected

    def test_cnn_helper_structure(self, registry):
        _, net = zoo.build_model("HM5", registry, "desk")
        assert sum(isinstance(l, Conv2d) for l in net.layers) == 4
        assert sum(isinstance(l, MaxPool) for l in net.layers) == 2

    def test_desk_hm5_forward_smoke(self, registry):
        spec, net = zoo.build_model("HM5", registry, "desk", seed=3)
        rng = np.random.default_rng(4)
        width = registry.width_of(spec.feature_templates)
        x = (rng.random((3, width)) < 0.2).astype(float)
        out = net.forward(x)
        assert out.shape == (3, 2)
        assert np.isfinite(out).all()
        assert ((out > 0) & (out < 1)).all()


class TestBuildAll:
    def test_seven_models(self, registry):
        models = zoo.build_all(registry, "desk")
        assert set(models.keys()) == set(zoo.MODEL_NAMES)

    def test_every_helper_is_strict_subset_of_static(self):
        static = set(zoo.MODEL_TEMPLATES["Static"])
        for name in zoo.MODEL_NAMES[1:]:
            selected = set(zoo.MODEL_TEMPLATES[name])
            assert 1 <= len(selected) < len(static)
            assert selected < static

    def test_input_widths_match_projection(self, registry):
        models = zoo.build_all(registry, "desk")
        for name, (spec, net) in models.items():
            width = registry.width_of(spec.feature_templates)
            x = np.zeros((1, width))
            out = net.forward(x)
            assert out.shape == (1, 2), name

    def test_missing_template_named_in_error(self):
        partial = build_registry([(n, 8) for n in zoo.MODEL_TEMPLATES["Static"] if n != "intents"])
        with pytest.raises(KeyError, match="intents"):
            zoo.build_all(partial, "desk")

    def test_kind_assignment_matches_model_table(self):
        for name in zoo.MLP_HELPERS:
            assert zoo.model_spec(name).kind == "MLP"
        for name in ("Static",) + zoo.CNN_HELPERS:
            assert zoo.model_spec(name).kind == "CNN"


class TestCheckpointMetadata:
    def test_save_load_self_describing(self, registry, tmp_path):
        spec, net = zoo.build_model("HM3", registry, "desk", seed=7)
        net.snap_to_f32()
        path = tmp_path / "hm3.adwt"
        zoo.save_model(spec, net, path)
        spec2, net2 = zoo.load_model(path, registry)
        assert spec2 == spec
        x = np.zeros((2, registry.width_of(spec.feature_templates)))
        assert np.array_equal(net.forward(x), net2.forward(x))
