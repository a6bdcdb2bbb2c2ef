import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphprompt.errors import NonFiniteLossError
from graphprompt.gnn import build_model, count_params
from graphprompt.graph import Dataset, Graph, generate_synthetic_dataset
from graphprompt.prompt import PromptVector
from graphprompt.tuning import (MetricCurve, Strategy, TrainConfig, compare_strategies,
                                edge_prediction_auc, evaluate_auc, prepare_model,
                                pretrain_edge_prediction, strategy_param_counts, train)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic_dataset(0, 40, "triangle-motif", 4)


@pytest.fixture(scope="module")
def backbone():
    return build_model(4, 8, 3, "gin", seed=0)


def state_equal(a, b, names):
    return all(np.array_equal(a[n], b[n]) for n in names)


class TestAuc:
    def test_worked_example(self):
        assert evaluate_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_and_ties(self):
        assert evaluate_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert evaluate_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_single_class_raises(self):
        with pytest.raises(ValueError, match="both classes"):
            evaluate_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
    def test_matches_pairwise_oracle(self, data):
        scores, labels = zip(*data)
        if len(set(labels)) < 2:
            return
        assert evaluate_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


class TestStrategy:
    @pytest.mark.parametrize("text,name", [("ft", "ft"), ("GPF", "gpf"), ("partial-1", "partial-1"),
                                           ("mlp3", "mlp-3"), ("linear-probe", "linear-probe"),
                                           ("lp", "linear-probe")])
    def test_parse(self, text, name):
        assert Strategy.parse(text).name == name

    def test_invalid(self):
        with pytest.raises(ValueError):
            Strategy.parse("bogus")
        with pytest.raises(ValueError):
            Strategy("partial", 0)

    def test_trainable_groups(self, backbone):
        assert Strategy("partial", 1).trainable_groups(backbone) == ["layer2", "head"]
        assert Strategy("gpf").trainable_groups(backbone) == ["head"]
        with pytest.raises(ValueError):
            Strategy("partial", 4).trainable_groups(backbone)

    def test_partial_all_layers_equals_ft(self, backbone):
        a = Strategy("partial", 3).configure(backbone.copy())
        b = Strategy("ft").configure(backbone.copy())
        assert a.frozen == b.frozen

    def test_gpf_counts_prompt_plus_head(self, backbone):
        trainable, total = strategy_param_counts(backbone, Strategy("gpf"))
        head = prepare_model(backbone, Strategy("gpf"))
        n_head = sum(t.values.size for n, t in head.params.items() if n.startswith("head."))
        assert trainable == 4 + n_head
        assert total == count_params(head) + 4


class TestTrain:
    def test_input_model_untouched_and_backbone_frozen(self, backbone, small_ds):
        cfg = TrainConfig(learning_rate=0.001, epochs=3, batch_size=8)
        for name in ("gpf", "mlp-3", "linear-probe", "partial-1", "ft"):
            s = Strategy.parse(name)
            model = prepare_model(backbone, s, seed=1)
            before = model.state()
            result = train(model, s, small_ds, cfg)
            assert state_equal(model.state(), before, before)
            after = result.model.state()
            layers = [n for n in before if n.startswith("layer")]
            changed = {n.split(".")[0] for n in layers if not np.array_equal(before[n], after[n])}
            expected = {"ft": {"layer0", "layer1", "layer2"}, "partial-1": {"layer2"}}.get(name, set())
            assert changed == expected, name

    def test_prompt_is_routed_into_the_forward_pass(self, backbone, small_ds):
        s = Strategy("gpf")
        model = prepare_model(backbone, s)
        cfg = TrainConfig(epochs=0)
        zero = train(model, s, small_ds, cfg)
        shifted = train(model, s, small_ds, cfg, prompt=PromptVector(np.full(4, 3.0)))
        assert zero.curve.final.train_loss != shifted.curve.final.train_loss

    def test_gpf_trains_the_prompt(self, backbone, small_ds):
        s = Strategy("gpf")
        result = train(prepare_model(backbone, s), s, small_ds,
                       TrainConfig(learning_rate=0.01, epochs=3, batch_size=8))
        assert np.any(result.prompt.values != 0)

    def test_backtracking_loss_non_increasing(self, backbone, small_ds):
        s = Strategy("ft")
        cfg = TrainConfig(learning_rate=1.0, epochs=8, batch_size=1000, backtracking=True)
        losses = [p.train_loss for p in train(prepare_model(backbone, s), s, small_ds, cfg).curve.points]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, backbone, small_ds):
        s = Strategy("ft")
        with pytest.raises(NonFiniteLossError):
            train(prepare_model(backbone, s), s, small_ds,
                  TrainConfig(learning_rate=1e6, epochs=30, batch_size=8))

    def test_deterministic(self, backbone, small_ds):
        s = Strategy("partial", 1)
        cfg = TrainConfig(learning_rate=0.001, epochs=2, batch_size=8, seed=4)
        a = train(prepare_model(backbone, s, 4), s, small_ds, cfg)
        b = train(prepare_model(backbone, s, 4), s, small_ds, cfg)
        assert a.curve == b.curve

    def test_curve_schedule(self, backbone, small_ds):
        s = Strategy("linear-probe")
        curve = train(prepare_model(backbone, s), s, small_ds,
                      TrainConfig(epochs=5, eval_every=2, batch_size=8)).curve
        assert [p.epoch for p in curve.points] == [0, 2, 4, 5]


def test_curve_csv_roundtrip(tmp_path):
    c = MetricCurve("auc")
    c.add(0, 0.69, 0.5, float("nan"))
    c.add(1, 0.6, 0.7, 0.65)
    c.write_csv(tmp_path / "c.csv")
    back = MetricCurve.read_csv(tmp_path / "c.csv")
    assert back.points[1] == c.points[1] and np.isnan(back.points[0].test_metric)
    with pytest.raises(ValueError):
        c.add(1, 0, 0, 0)


class TestPretrain:
    def test_improves_edge_auc(self):
        ds = generate_synthetic_dataset(0, 60, "triangle-motif", 4)
        model = build_model(4, 16, 2, "gin", seed=0)
        cfg = TrainConfig(learning_rate=0.003, epochs=30, batch_size=16)
        trained = pretrain_edge_prediction(model, ds, cfg)
        graphs = ds.subset("train")
        # reference run: train 0.634 -> 0.703, held-out 0.642 after
        assert edge_prediction_auc(trained, graphs) >= edge_prediction_auc(model, graphs) + 0.05
        held_out = ds.subset("valid") + ds.subset("test")
        assert edge_prediction_auc(trained, held_out) >= 0.5 + 0.1

    def test_zero_epochs_is_identity(self, backbone, small_ds):
        out = pretrain_edge_prediction(backbone, small_ds, TrainConfig(epochs=0))
        assert state_equal(out.state(), backbone.state(), backbone.state())

    def test_head_untouched_and_deterministic(self, backbone, small_ds):
        cfg = TrainConfig(learning_rate=0.003, epochs=2, batch_size=16)
        a = pretrain_edge_prediction(backbone, small_ds, cfg)
        b = pretrain_edge_prediction(backbone, small_ds, cfg)
        assert state_equal(a.state(), b.state(), a.state())
        heads = [n for n in a.state() if n.startswith("head.")]
        assert state_equal(a.state(), backbone.state(), heads)

    def test_no_edges(self):
        ds = Dataset([Graph([[0]], [[1.0]], label=0, graph_id="a")])
        with pytest.raises(ValueError, match="edges"):
            pretrain_edge_prediction(build_model(1, 2, 1), ds, TrainConfig(epochs=1))


class TestCompare:
    def test_single_seed_has_zero_std_and_csv(self, backbone, small_ds, tmp_path):
        strategies = [Strategy("gpf"), Strategy("gpf"), Strategy("linear-probe")]
        result = compare_strategies(backbone, small_ds, strategies,
                                    TrainConfig(epochs=2, batch_size=8), n_seeds=1)
        assert all(r.std == 0.0 for r in result.rows)
        assert result.rows[0].mean == result.rows[1].mean or np.isnan(result.rows[0].mean)
        result.write_csv(tmp_path / "c.csv")
        with open(tmp_path / "c.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["strategy", "mean", "std", "trainable_params", "total_params"]
        assert rows[2]["strategy"] == "linear-probe"

    def test_seeds_recorded(self, backbone, small_ds):
        result = compare_strategies(backbone, small_ds, [Strategy("linear-probe")],
                                    TrainConfig(epochs=1, batch_size=8, seed=10), n_seeds=3)
        assert sorted(result.curves) == [("linear-probe", 10), ("linear-probe", 11), ("linear-probe", 12)]
        assert len(result.rows[0].values) == 3
