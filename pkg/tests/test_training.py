"""Loss terms, optimizer arithmetic, schedules, and the staged driver."""

import json

import numpy as np
import pytest

from softtree.autodiff import Tensor
from softtree.backbone import DeskBackboneSpec, build_desk_backbone
from softtree.data import AugmentPolicy, compute_stats, generate_synthetic
from softtree.errors import ConfigError, InputError, NumericError
from softtree.nn import xavier_init
from softtree.training import (SGD, StagePlan, TrainPlan, desk_plan,
                               fit_two_stage, lr_at, nll, paper_plan, sgd_step,
                               total_loss)
from softtree.tree import TreeConfig, build_tree


def small_setup(height=2, seed=0, classes=3, side=16, channels=4, dilations=(1, 2)):
    bb = build_desk_backbone(DeskBackboneSpec(3, side, (channels, channels)),
                             seed=seed)
    cfg = TreeConfig(height=height, num_classes=classes,
                     channels=(channels,) * height, dilations=dilations)
    return build_tree(cfg, bb, seed=seed + 1)


class TestNll:
    def test_uniform_is_log_k(self):
        k = 200
        dist = Tensor(np.full((3, k), 1.0 / k))
        out = nll(dist, np.zeros(3, dtype=int))
        assert abs(out.item() - np.log(k)) < 1e-12
        assert abs(out.item() - 5.2983) < 1e-4

    def test_one_hot_correct_is_zero(self):
        dist = np.zeros((2, 4))
        dist[0, 1] = dist[1, 3] = 1.0
        out = nll(Tensor(dist), np.array([1, 3]))
        assert out.item() <= 1e-9

    def test_half_half_is_log_two(self):
        out = nll(Tensor(np.array([[0.5, 0.5]])), np.array([0]))
        assert abs(out.item() - np.log(2.0)) < 1e-12
        assert abs(out.item() - 0.6931) < 1e-4

    def test_out_of_range_label_is_input_error(self):
        dist = Tensor(np.full((1, 3), 1 / 3))
        with pytest.raises(InputError):
            nll(dist, np.array([3]))
        with pytest.raises(InputError):
            nll(dist, np.array([-1]))

    def test_unnormalized_rows_are_numeric_error(self):
        with pytest.raises(NumericError):
            nll(Tensor(np.array([[0.9, 0.3]])), np.array([0]))


class TestTotalLoss:
    def test_h1_is_twice_leaf_loss(self):
        model = small_setup(height=1)
        x = Tensor(np.random.default_rng(0).random((4, 3, 16, 16)))
        labels = np.array([0, 1, 2, 0])
        pred = model.forward(x, training=True)
        total = total_loss(pred, labels).item()
        leaf = nll(pred.leaf_probs[0], labels).item()
        assert abs(total - 2.0 * leaf) <= 1e-12

    def test_h2_uniform_leaves_give_three_log_k(self):
        model = small_setup(height=2, classes=4)
        for head in model.leaves:
            head.fc.weight.data[:] = 0.0
            head.fc.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).random((5, 3, 16, 16)))
        labels = np.array([0, 1, 2, 3, 0])
        total = total_loss(model.forward(x, training=True), labels).item()
        assert abs(total - 3.0 * np.log(4.0)) < 1e-9
        assert abs(total - 4.1589) < 1e-4

    def test_decomposition_identity(self):
        rng = np.random.default_rng(2)
        model = small_setup(height=3, seed=5)
        for _ in range(5):
            x = Tensor(rng.random((3, 3, 16, 16)))
            labels = rng.integers(0, 3, size=3)
            pred = model.forward(x, training=True)
            total = total_loss(pred, labels).item()
            parts = nll(pred.final, labels).item() + \
                sum(nll(p, labels).item() for p in pred.leaf_probs)
            assert abs(total - parts) <= 1e-9


class TestXavier:
    def test_variance_matches_formula(self):
        fan_in, fan_out = 30, 50
        draws = xavier_init((100_000,), fan_in, fan_out, seed=0)
        target = 2.0 / (fan_in + fan_out)
        assert abs(draws.var() - target) / target < 0.05
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(draws) <= bound)

    def test_layer_biases_start_at_zero(self):
        model = small_setup()
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                np.testing.assert_array_equal(p.data, np.zeros_like(p.data))

    def test_same_seed_identical_bytes(self):
        a = xavier_init((64,), 8, 8, seed=9)
        b = xavier_init((64,), 8, 8, seed=9)
        assert a.tobytes() == b.tobytes()


class TestSgd:
    def test_plain_gradient_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        sgd_step([p], [np.array([0.5, -1.0])], [np.zeros(2)], lr=0.1,
                 momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(p.data, [0.95, 2.1], atol=1e-15)

    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        sgd_step([p], [np.zeros(1)], [np.zeros(1)], lr=0.5, momentum=0.9,
                 weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [3.0])

    def test_two_momentum_steps_match_hand_recurrence(self):
        # w0=1, g=0.5 each step, lr=0.1, m=0.9:
        # v1=0.5, w1=0.95; v2=0.95, w2=0.855
        p = Tensor(np.array([1.0]), requires_grad=True)
        v = [np.zeros(1)]
        g = [np.array([0.5])]
        sgd_step([p], g, v, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [0.95], atol=1e-12)
        sgd_step([p], g, v, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [0.855], atol=1e-12)

    def test_weight_decay_skips_undecayed_tensors(self):
        decayed = Tensor(np.array([1.0]), requires_grad=True)
        exempt = Tensor(np.array([1.0]), requires_grad=True)
        exempt.decay = False
        sgd_step([decayed, exempt], [np.zeros(1), np.zeros(1)],
                 [np.zeros(1), np.zeros(1)], lr=1.0, momentum=0.0,
                 weight_decay=0.1)
        np.testing.assert_allclose(decayed.data, [0.9], atol=1e-15)
        np.testing.assert_array_equal(exempt.data, [1.0])

    def test_zero_lr_changes_nothing(self):
        model = small_setup()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        opt = SGD(list(model.named_parameters()), momentum=0.9, weight_decay=1e-3)
        for p in opt.params:
            p.grad = np.ones_like(p.data)
        opt.step(lr=0.0)
        for n, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])


class TestSchedule:
    def test_paper_stage1_epoch12(self):
        assert lr_at(paper_plan().stages[0], 12) == 0.25

    def test_paper_stage1_epoch45(self):
        assert abs(lr_at(paper_plan().stages[0], 45) - 0.00390625) < 1e-15

    def test_paper_stage2_epoch35(self):
        assert abs(lr_at(paper_plan().stages[1], 35) - 1e-4) < 1e-18

    def test_non_increasing_within_stage(self):
        for stage in paper_plan().stages + desk_plan().stages:
            rates = [lr_at(stage, e) for e in range(1, stage.epochs + 1)]
            assert all(b <= a for a, b in zip(rates, rates[1:]))

    def test_paper_preset_values_verbatim(self):
        plan = paper_plan()
        s1, s2 = plan.stages
        assert (s1.freeze_backbone, s1.epochs, s1.batch_size, s1.lr) == \
            (True, 60, 24, 1.0)
        assert (s1.lr_divisor, s1.milestones, s1.weight_decay) == \
            (4.0, (10, 20, 30, 40), 5e-6)
        assert (s2.freeze_backbone, s2.epochs, s2.batch_size, s2.lr) == \
            (False, 200, 16, 0.001)
        assert (s2.lr_divisor, s2.milestones, s2.weight_decay) == \
            (10.0, (30, 40, 50), 5e-4)
        assert plan.momentum == 0.9

    def test_invalid_plans_rejected(self):
        with pytest.raises(ConfigError):
            StagePlan(False, epochs=5, batch_size=4, lr=0.1, lr_divisor=1.0,
                      milestones=(), weight_decay=0.0)
        with pytest.raises(ConfigError):
            StagePlan(False, epochs=5, batch_size=4, lr=0.1, lr_divisor=2.0,
                      milestones=(3, 2), weight_decay=0.0)
        with pytest.raises(ConfigError):
            StagePlan(False, epochs=5, batch_size=4, lr=0.1, lr_divisor=2.0,
                      milestones=(5,), weight_decay=0.0)


def quick_plan(seed=0):
    return TrainPlan(stages=(
        StagePlan(freeze_backbone=True, epochs=2, batch_size=4, lr=0.05,
                  lr_divisor=10.0, milestones=(), weight_decay=5e-6),
        StagePlan(freeze_backbone=False, epochs=2, batch_size=4, lr=0.01,
                  lr_divisor=10.0, milestones=(), weight_decay=5e-4),
    ), momentum=0.9, seed=seed, precision="float64")


class TestFit:
    def setup_method(self):
        self.train, self.test = generate_synthetic(3, 6, 16, seed=11)
        self.stats = compute_stats(self.train)
        self.policy = AugmentPolicy(resize_shorter=18, crop=16, hflip_prob=0.5)

    def test_runs_and_reports_every_epoch(self):
        model = small_setup(classes=3)
        _, records = fit_two_stage(model, self.train, self.test, quick_plan(),
                                   self.policy, self.stats)
        assert len(records) == 4
        for r in records:
            assert set(r) == {"stage", "epoch", "lr", "train_loss", "train_top1",
                              "val_top1", "leaf_top1"}
            assert len(r["leaf_top1"]) == model.config.num_leaves
            assert np.isfinite(r["train_loss"])

    def test_stage1_freezes_backbone_bytes(self):
        model = small_setup(classes=3, seed=7)
        plan = TrainPlan(stages=(quick_plan().stages[0],), momentum=0.9,
                         seed=3, precision="float64")
        before = {n: p.data.tobytes() for n, p in model.named_parameters()
                  if n.startswith("backbone.")}
        fit_two_stage(model, self.train, self.test, plan, self.policy, self.stats)
        after = {n: p.data.tobytes() for n, p in model.named_parameters()
                 if n.startswith("backbone.")}
        assert before == after
        # and something else actually trained
        assert any(not n.startswith("backbone.") for n, _ in model.named_parameters())

    def test_unfrozen_stage_moves_backbone(self):
        model = small_setup(classes=3, seed=8)
        plan = TrainPlan(stages=(quick_plan().stages[1],), momentum=0.9,
                         seed=3, precision="float64")
        before = {n: p.data.tobytes() for n, p in model.named_parameters()
                  if n.startswith("backbone.")}
        fit_two_stage(model, self.train, self.test, plan, self.policy, self.stats)
        after = {n: p.data.tobytes() for n, p in model.named_parameters()
                 if n.startswith("backbone.")}
        assert before != after

    def test_same_seed_identical_records(self):
        def run():
            model = small_setup(classes=3, seed=9)
            _, records = fit_two_stage(model, self.train, self.test,
                                       quick_plan(seed=5), self.policy, self.stats)
            return json.dumps(records, sort_keys=True)

        assert run() == run()

    def test_nan_parameter_aborts_with_op_name(self):
        model = small_setup(classes=3, seed=10)
        model.leaves[0].conv.weight.data[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError, match="conv2d"):
            fit_two_stage(model, self.train, self.test, quick_plan(),
                          self.policy, self.stats)

    def test_best_and_stage_checkpoint_callbacks_fire(self):
        model = small_setup(classes=3, seed=12)
        tags = []
        fit_two_stage(model, self.train, self.test, quick_plan(), self.policy,
                      self.stats, on_checkpoint=lambda tag, m, s: tags.append(tag))
        assert "stage1" in tags and "stage2" in tags and "best" in tags
