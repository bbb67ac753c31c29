"""Heatmap generation: normalization, degeneracy, sites, PGM export."""

import numpy as np
import pytest

from softtree.autodiff import Tensor
from softtree.backbone import DeskBackboneSpec, build_desk_backbone
from softtree.data import read_image
from softtree.errors import InputError
from softtree.gradcam import all_sites, grad_cam, parse_site, write_pgm
from softtree.tree import TreeConfig, build_tree


def make_model(height=2, seed=0):
    bb = build_desk_backbone(DeskBackboneSpec(3, 16, (4, 4)), seed=seed)
    cfg = TreeConfig(height=height, num_classes=3, channels=(4,) * height,
                     dilations=(1, 2))
    model = build_tree(cfg, bb, seed=seed + 1)
    # a few training-mode passes so eval-mode BN works
    rng = np.random.default_rng(seed + 2)
    for _ in range(3):
        model.forward(Tensor(rng.random((8, 3, 16, 16))), training=True)
    return model


class TestSites:
    def test_parse_node_and_leaf(self):
        assert parse_site("node:1:1", 3) == (1, 1)
        assert parse_site("node:3:4", 3) == (3, 4)
        assert parse_site("leaf:2", 3) == (3, 2)

    def test_bad_sites_are_input_errors(self):
        for site in ("node:0:1", "node:4:1", "leaf:5", "blob:1", "leaf:x"):
            with pytest.raises(InputError):
                parse_site(site, 3)

    def test_all_sites_counts(self):
        sites = all_sites(3)
        assert len(sites) == 3 + 4
        assert sites[0] == "node:1:1"
        assert sites[-1] == "leaf:4"
        assert all_sites(1) == ["leaf:1"]


class TestGradCam:
    def test_values_normalized(self):
        model = make_model()
        x = Tensor(np.random.default_rng(5).random((1, 3, 16, 16)))
        hm = grad_cam(model, x, target_class=0, site="node:1:1")
        assert hm.values.shape == (16, 16)
        assert not hm.degenerate
        assert hm.values.min() >= 0.0
        assert abs(hm.values.max() - 1.0) < 1e-12

    def test_leaf_sites_work_for_every_leaf(self):
        model = make_model(height=3)
        x = Tensor(np.random.default_rng(6).random((1, 3, 16, 16)))
        for site in all_sites(3):
            hm = grad_cam(model, x, target_class=1, site=site)
            assert hm.values.shape == (16, 16)

    def test_detached_site_is_degenerate(self):
        model = make_model(height=1)
        model.leaves[0].fc.weight.data[:] = 0.0  # cuts gradient to the map
        x = Tensor(np.random.default_rng(7).random((1, 3, 16, 16)))
        hm = grad_cam(model, x, target_class=0, site="leaf:1")
        assert hm.degenerate
        np.testing.assert_array_equal(hm.values, np.zeros((16, 16)))

    def test_unknown_site_and_class_rejected(self):
        model = make_model()
        x = Tensor(np.random.default_rng(8).random((1, 3, 16, 16)))
        with pytest.raises(InputError):
            grad_cam(model, x, target_class=0, site="node:9:9")
        with pytest.raises(InputError):
            grad_cam(model, x, target_class=17, site="node:1:1")

    def test_gradients_cleared_afterwards(self):
        model = make_model()
        x = Tensor(np.random.default_rng(9).random((1, 3, 16, 16)))
        grad_cam(model, x, target_class=0, site="node:1:1")
        assert all(p.grad is None for p in model.parameters())


class TestWritePgm:
    def test_roundtrip_within_one_level(self, tmp_path):
        model = make_model()
        x = Tensor(np.random.default_rng(10).random((1, 3, 16, 16)))
        hm = grad_cam(model, x, target_class=2, site="leaf:1")
        write_pgm(hm, tmp_path / "hm.pgm")
        back = read_image(tmp_path / "hm.pgm")[0]
        assert np.max(np.abs(back - hm.values)) <= 1.0 / 255
