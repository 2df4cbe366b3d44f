import csv
import json

import pytest

from dtrec import cli

TINY = """[run]
seed = 0
[data]
users = 40
branching = 2,2
items_per_leaf = 4
len_min = 6
len_max = 10
[train]
d_model = 8
n_layers = 1
max_len = 10
steps = 2
epochs = 2
batch_size = 64
instances_per_user = 1
k0 = 2
k_upper = 8
kmeans_restarts = 1
[ablate]
variants = base,hps_arh
seeds = 0,1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def run(config, tmp_path, *args):
    return cli.main([*args, "--config", str(config), "--output-dir", str(tmp_path / "runs"), "-q"])


def test_missing_config_file_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.ini")]) == 2
    assert "not found" in capsys.readouterr().err


def test_unknown_key_and_bad_value_are_usage_errors(config, tmp_path):
    assert run(config, tmp_path, "train", "--set", "train.learning_rate=1") == 2
    assert run(config, tmp_path, "train", "--set", "train.lr=fast") == 2
    assert run(config, tmp_path, "train", "--set", "nosection.x=1") == 2
    assert cli.main(["frobnicate"]) == 2


def test_overrides_take_precedence(config):
    cfg = cli.load_config(str(config), ["train.lr=0.5"], seed=7)
    assert cfg["train"]["lr"] == 0.5 and cfg["run"]["seed"] == 7
    assert cfg["train"]["steps"] == 2
    text = cli.render_config(cfg)
    assert "lr = 0.5" in text


def test_same_seed_gives_identical_metrics(config, tmp_path):
    assert run(config, tmp_path, "train", "--variant", "hps_arh") == 0
    assert run(config, tmp_path, "train", "--variant", "hps_arh") == 0
    first = tmp_path / "runs" / "train-hps_arh-s0"
    dirs = sorted((tmp_path / "runs").iterdir())
    assert len(dirs) == 2  # the second run got a fresh suffixed directory
    a, b = [(d / "metrics.json").read_bytes() for d in dirs]
    assert a == b
    assert {"checkpoint.dtrec", "history.json", "metrics.json", "resolved_config", "log"} <= {
        p.name for p in first.iterdir()}


def test_eval_and_analyze_a_checkpoint(config, tmp_path):
    assert run(config, tmp_path, "train", "--variant", "hps_arh") == 0
    ckpt = next((tmp_path / "runs").iterdir()) / "checkpoint.dtrec"
    assert cli.main(["eval", str(ckpt), "--output-dir", str(tmp_path / "ev"), "-q"]) == 0
    metrics = json.loads(next((tmp_path / "ev").iterdir()).joinpath("metrics.json").read_text())
    assert 0 <= metrics["ndcg"]["10"] <= 1
    trained = json.loads((ckpt.parent / "metrics.json").read_text())
    assert metrics["ndcg"] == trained["ndcg"]
    assert cli.main(["analyze", str(ckpt), "--output-dir", str(tmp_path / "an"), "-q"]) == 0
    out = next((tmp_path / "an").iterdir())
    assert {"steps_by_length.csv", "exits.csv", "trajectories.csv", "analysis.json"} <= {p.name for p in out.iterdir()}
    with open(out / "trajectories.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:2] == ["user_id", "step"] and header[-2:] == ["assigned_prototype_id", "target_item_id"]
    assert cli.main(["eval", str(tmp_path / "missing.dtrec")]) == 2


def test_ablate_writes_one_row_per_variant_and_seed(config, tmp_path):
    assert run(config, tmp_path, "ablate") == 0
    out = next((tmp_path / "runs").iterdir())
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["Model"] for r in rows] == ["Base", "Base", "+HPS+ARH", "+HPS+ARH"]
    assert list(rows[0]) == ["Model", "seed", "N@10", "Cons."]
    assert rows[0]["Cons."] == "100.0%"
    assert len(json.loads((out / "metrics.json").read_text())["runs"]) == 4


def test_gen_data_writes_loadable_tsv(config, tmp_path):
    out = tmp_path / "d.tsv"
    assert run(config, tmp_path, "gen-data", "--out", str(out)) == 0
    from dtrec.data import load_interactions

    assert load_interactions(out, core=1).n_users == 40
