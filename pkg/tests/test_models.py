"""Architecture construction, shape traces and the describe() table."""

import numpy as np
import pytest

from voxnet.errors import ConfigError
from voxnet.models import (
    VOXCNN_FILTERS, build, build_voxcnn, build_voxresnet, describe, load_model, save_model,
    spatial_trace, zero_residual_branches,
)


def voxcnn_param_formula(cube_features, k=2):
    conv, cin = 0, 1
    for f in VOXCNN_FILTERS:
        conv += (cin * 27 + 1) * f
        cin = f
    head = cube_features * 128 + 128 + 2 * 128 + 128 * 64 + 64 + 2 * 64 + 64 * k + k
    return conv + head


class TestVoxCNN:
    def test_trace_at_full_scale(self):
        net = build_voxcnn(cube=110)
        assert spatial_trace(net) == [110, 55, 27, 13, 6]
        assert net.shapes[-1] == (2,)
        assert net.shapes[net.layers.index(next(l for l in net.layers if l.kind == "flatten"))] == (13824,)

    def test_four_conv_blocks_with_increasing_filters(self):
        table = describe(build_voxcnn(cube=110))
        convs = [r for r in table.rows if r["kind"] == "conv3d"]
        assert len(convs) == 4
        assert [r["output"][0] for r in convs] == [8, 16, 32, 64]

    def test_param_count_closed_form(self):
        assert build_voxcnn(cube=110).num_params() == voxcnn_param_formula(64 * 6 ** 3) == 1851282
        assert build_voxcnn(cube=32).num_params() == voxcnn_param_formula(64 * 2 ** 3)

    def test_desk_scale_trace(self):
        assert spatial_trace(build_voxcnn(cube=32)) == [32, 16, 8, 4, 2]
        assert spatial_trace(build_voxcnn(cube=12)) == [12, 6, 3, 1]

    def test_rejects_single_class(self):
        with pytest.raises(ConfigError):
            build_voxcnn(num_classes=1)


class TestVoxResNet:
    def test_trace_and_pooled_shape(self):
        net = build_voxresnet(cube=110)
        assert spatial_trace(net) == [110, 55, 28, 14, 2]
        pool = next(i for i, l in enumerate(net.layers) if l.kind == "maxpool3d")
        assert net.shapes[pool] == (128, 2, 2, 2)
        assert net.layers[pool].window == (7, 7, 7)

    @pytest.mark.parametrize("cube", [12, 32, 64])
    def test_pooled_shape_at_desk_scale(self, cube):
        net = build_voxresnet(cube=cube)
        pool = next(i for i, l in enumerate(net.layers) if l.kind == "maxpool3d")
        assert net.shapes[pool] == (128, 2, 2, 2)

    def test_six_blocks_and_hidden_width(self):
        net = build_voxresnet(cube=32)
        table = describe(net)
        blocks = [r for r in table.rows if r["kind"] == "voxres_block"]
        assert len(blocks) == 6
        assert [r["output"][0] for r in blocks] == [64, 64, 64, 64, 128, 128]
        dense = [r for r in table.rows if r["kind"] == "dense"]
        assert dense[0]["output"] == (128,)
        assert len(table.rows) == len(net.layers)

    def test_layer_count_reconstruction(self):
        net = build_voxresnet(cube=32)
        weighted = sum(1 for l in net.layers if l.kind in ("conv3d", "dense"))
        weighted += 2 * sum(1 for l in net.layers if l.kind == "voxres_block")
        standalone_bn = sum(1 for l in net.layers if l.kind == "batchnorm")
        output = sum(1 for l in net.layers if l.kind == "softmax_output")
        # stem + 3 strided convs + 12 branch convs + 2 dense
        assert weighted == 18
        assert standalone_bn == 2
        assert weighted + standalone_bn + output == 21

    def test_zeroed_branches_still_normalized(self, rng):
        net = zero_residual_branches(build_voxresnet(cube=16, seed=1))
        probs = net.predict(rng.random((2, 1, 16, 16, 16), dtype=np.float32))
        assert np.all(np.isfinite(probs))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


class TestBuilders:
    @pytest.mark.parametrize("arch", ["voxcnn", "voxresnet"])
    def test_deterministic(self, arch):
        a, b = build(arch, cube=16, seed=3), build(arch, cube=16, seed=3)
        for va, vb in zip(a.parameters().values(), b.parameters().values()):
            np.testing.assert_array_equal(va, vb)

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            build("alexnet")

    def test_multiclass_head(self):
        assert build_voxcnn(num_classes=4, cube=16).num_classes == 4

    def test_describe_serializations(self):
        table = describe(build_voxcnn(cube=32))
        text = table.to_text()
        assert "conv3d" in text and f"total params: {table.total_params}" in text
        records = table.to_records()
        assert records[0]["output"] == [8, 32, 32, 32]

    def test_save_load_model(self, tmp_path, rng):
        net = build_voxresnet(cube=16, seed=2)
        save_model(net, str(tmp_path / "m.vox"))
        back = load_model(str(tmp_path / "m.vox"))
        x = rng.random((1, 1, 16, 16, 16), dtype=np.float32)
        np.testing.assert_array_equal(net.predict(x), back.predict(x))
