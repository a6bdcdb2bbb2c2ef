import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from graphprompt.cli import main
from graphprompt.gnn import HeadSpec, build_model, linear_gin, save_checkpoint
from graphprompt.graph import FeatureTransform, Graph, LinkTransform, save_graph, save_spec
from graphprompt.prompt import load_prompt


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def k2_files(tmp_path):
    g = Graph.from_edges(2, [(0, 1)], [[1.0], [2.0]])
    save_graph(g, tmp_path / "g.json")
    save_spec(FeatureTransform([[0.0], [1.0]]), tmp_path / "feat.json")
    save_spec(LinkTransform.from_edits(2, remove=[(0, 1)]), tmp_path / "link.json")
    save_checkpoint(linear_gin([[1.0]], 0.0, head=HeadSpec()), tmp_path / "gin1.json")
    save_checkpoint(build_model(1, 4, 2, "gin", seed=0), tmp_path / "gin2.json")
    return tmp_path


def run(runner, *args):
    return runner.invoke(main, [str(a) for a in args])


class TestSolveVerify:
    @pytest.mark.parametrize("spec,expected", [("feat", 0.5), ("link", -0.75)])
    def test_solve_then_verify(self, runner, k2_files, spec, expected):
        d = k2_files
        r = run(runner, "solve", "--graph", d / "g.json", "--spec", d / f"{spec}.json",
                "--checkpoint", d / "gin1.json", "--out-prompt", d / "p.json")
        assert r.exit_code == 0, r.output
        assert load_prompt(d / "p.json").values.tolist() == [expected]
        r = run(runner, "verify", "--graph", d / "g.json", "--spec", d / f"{spec}.json",
                "--checkpoint", d / "gin1.json", "--prompt", d / "p.json", "--json")
        assert r.exit_code == 0
        assert json.loads(r.output)["rel_error"] <= 1e-9

    def test_verify_wrong_prompt_exits_1(self, runner, k2_files):
        d = k2_files
        (d / "bad.json").write_text('{"version": 1, "dim": 1, "p": [3.0]}')
        r = run(runner, "verify", "--graph", d / "g.json", "--spec", d / "feat.json",
                "--checkpoint", d / "gin1.json", "--prompt", d / "bad.json")
        assert r.exit_code == 1 and r.output.startswith("FAIL")

    def test_solve_rejects_deep_model(self, runner, k2_files):
        d = k2_files
        r = run(runner, "solve", "--graph", d / "g.json", "--spec", d / "feat.json",
                "--checkpoint", d / "gin2.json", "--out-prompt", d / "p.json")
        assert r.exit_code == 2
        assert "solver-grade" in r.output and "layer" in r.output

    def test_fit(self, runner, k2_files):
        d = k2_files
        r = run(runner, "fit", "--graph", d / "g.json", "--spec", d / "feat.json",
                "--checkpoint", d / "gin1.json", "--steps", 500, "--out-prompt", d / "p.json")
        assert r.exit_code == 0, r.output
        assert load_prompt(d / "p.json").values[0] == pytest.approx(0.5, abs=1e-9)

    def test_missing_file_exits_4(self, runner, k2_files):
        d = k2_files
        r = run(runner, "solve", "--graph", d / "nope.json", "--spec", d / "feat.json",
                "--checkpoint", d / "gin1.json", "--out-prompt", d / "p.json")
        assert r.exit_code == 4 and "error:" in r.output


def test_params_gpf_is_prompt_plus_head(runner, k2_files):
    r = run(runner, "params", "--checkpoint", k2_files / "gin2.json", "--strategy", "ft,gpf")
    assert r.exit_code == 0
    lines = dict(line.split(" ", 1) for line in r.output.strip().splitlines())
    gpf = dict(kv.split("=") for kv in lines["strategy=gpf"].split())
    # F = 1 prompt entry plus a 4 -> 1 linear head with bias
    assert int(gpf["trainable"]) == 1 + 4 + 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfg = {"model": {"layers": 2, "hidden": 8},
           "train": {"learning_rate": 0.005, "epochs": 3, "batch_size": 16},
           "pretrain": {"learning_rate": 0.003, "epochs": 2, "batch_size": 16}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    runner = CliRunner()
    assert run(runner, "gen-data", "--seed", 1, "--n", 40, "--dim", 4, "--out", d / "d.jsonl").exit_code == 0
    r = run(runner, "pretrain", "--config", d / "cfg.json", "--data", d / "d.jsonl",
            "--out-checkpoint", d / "ck.json")
    assert r.exit_code == 0, r.output
    return d


class TestPipeline:
    def test_gen_data_is_reproducible(self, runner, tmp_path):
        for name in ("a", "b"):
            run(runner, "gen-data", "--seed", 3, "--n", 10, "--out", tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_pretrain_is_reproducible(self, runner, pipeline):
        d = pipeline
        run(runner, "pretrain", "--config", d / "cfg.json", "--data", d / "d.jsonl",
            "--out-checkpoint", d / "ck2.json")
        assert (d / "ck.json").read_bytes() == (d / "ck2.json").read_bytes()

    def test_tune_gpf_writes_curve_prompt_and_figure(self, runner, pipeline):
        d = pipeline
        r = run(runner, "tune", "--config", d / "cfg.json", "--checkpoint", d / "ck.json",
                "--data", d / "d.jsonl", "--strategy", "gpf", "--out-curve", d / "gpf.csv",
                "--out-prompt", d / "gpf_p.json")
        assert r.exit_code == 0, r.output
        with open(d / "gpf.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(x["epoch"]) for x in rows] == [0, 1, 2, 3]
        assert (d / "gpf.png").stat().st_size > 0
        assert load_prompt(d / "gpf_p.json").dim == 4

    def test_compare_outputs(self, runner, pipeline):
        d = pipeline
        r = run(runner, "compare", "--config", d / "cfg.json", "--checkpoint", d / "ck.json",
                "--data", d / "d.jsonl", "--strategies", "gpf,linear-probe", "--seeds", 2,
                "--out-csv", d / "cmp.csv")
        assert r.exit_code == 0, r.output
        with open(d / "cmp.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [x["strategy"] for x in rows] == ["gpf", "linear-probe"]
        assert sorted(p.name for p in (d / "cmp_curves").iterdir()) == [
            "gpf_seed0.csv", "gpf_seed1.csv", "linear-probe_seed0.csv", "linear-probe_seed1.csv"]
        assert (d / "cmp_curves.png").exists() and (d / "cmp_bars.png").exists()

    def test_unknown_config_key_exits_2(self, runner, pipeline, tmp_path):
        (tmp_path / "bad.json").write_text('{"train": {"learnin_rate": 0.1}}')
        r = run(runner, "tune", "--config", tmp_path / "bad.json", "--checkpoint", pipeline / "ck.json",
                "--data", pipeline / "d.jsonl", "--strategy", "gpf", "--out-curve", tmp_path / "c.csv")
        assert r.exit_code == 2 and "learnin_rate" in r.output

    def test_divergent_training_exits_3(self, runner, pipeline, tmp_path):
        (tmp_path / "hot.json").write_text('{"train": {"learning_rate": 1e8, "epochs": 20}}')
        r = run(runner, "tune", "--config", tmp_path / "hot.json", "--checkpoint", pipeline / "ck.json",
                "--data", pipeline / "d.jsonl", "--strategy", "ft", "--out-curve", tmp_path / "c.csv")
        assert r.exit_code == 3 and "learning rate" in r.output

    def test_bad_dataset_exits_2(self, runner, pipeline, tmp_path):
        (tmp_path / "bad.jsonl").write_text('{"id": "a", "n": 2, "edges": [[1, 0]], "x": [[1], [2]]}\n')
        r = run(runner, "tune", "--checkpoint", pipeline / "ck.json", "--data", tmp_path / "bad.jsonl",
                "--strategy", "gpf", "--out-curve", tmp_path / "c.csv")
        assert r.exit_code == 2 and "u < v" in r.output


def test_gpf_prompt_file_has_expected_values(runner, k2_files):
    r = run(runner, "solve", "--graph", k2_files / "g.json", "--spec", k2_files / "link.json",
            "--checkpoint", k2_files / "gin1.json", "--out-prompt", k2_files / "p.json")
    assert "p* = [-0.75]" in r.output
    assert np.array_equal(load_prompt(k2_files / "p.json").values, [-0.75])
