import json

import pytest

from sgsmote.cli import main
from sgsmote.graph import load_graph

KERN = """**kern\t**kern
*M4/4\t*M4/4
*k[]\t*k[]
=1\t=1
4G\t4d
4G\t4b
4C\t4c
4C\t4c
*-\t*-
"""

TRAIN_FLAGS = ["--hidden-dim", "8", "--batch-size", "256", "--epochs", "2"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "raw"), "--pieces", "4", "--seed", "2"]) == 0
    assert main(["ingest", str(root / "raw"), "--out", str(root / "scores")]) == 0
    assert main(["build", str(root / "scores"), "--out", str(root / "graphs")]) == 0
    return root


def test_ingest_kern_writes_table_pair(tmp_path):
    (tmp_path / "a.krn").write_text(KERN)
    (tmp_path / "a.meta.json").write_text(json.dumps({"cadences": [{"onset": "2", "type": "PAC"}]}))
    assert main(["ingest", str(tmp_path / "a.krn"), str(tmp_path / "a.meta.json"),
                 "--out", str(tmp_path / "out")]) == 0
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["a.meta.json", "a.tsv"]
    meta = json.loads((tmp_path / "out" / "a.meta.json").read_text())
    assert meta["cadences"] == [{"onset": "2", "type": "PAC"}]
    assert (tmp_path / "out" / "a.tsv").read_text().count("\n") == 9


def test_ingest_reports_corrupt_file(tmp_path, capsys):
    (tmp_path / "good.krn").write_text(KERN)
    (tmp_path / "bad.krn").write_text(KERN.replace("4C\t4c\n*-", "4C\t4%\n*-"))
    code = main(["ingest", str(tmp_path), "--out", str(tmp_path / "out")])
    assert code == 2
    err = capsys.readouterr().err
    assert "bad.krn" in err and "good.krn" not in err
    assert (tmp_path / "out" / "good.tsv").exists()


def test_build_writes_graph_and_manifest(pipeline):
    g = load_graph(pipeline / "graphs" / "local01.sggr")
    manifest = json.loads((pipeline / "graphs" / "local01.manifest.json").read_text())
    assert g.d == 83 == len(manifest["features"])


def test_build_general_feature_set(pipeline, tmp_path):
    assert main(["build", str(pipeline / "scores"), "--out", str(tmp_path), "--feature-set", "general"]) == 0
    g = load_graph(tmp_path / "local02.sggr")
    manifest = json.loads((tmp_path / "local02.manifest.json").read_text())
    assert g.d == 71 and manifest["feature_set"] == "general"


def test_train_eval_predict(pipeline, tmp_path):
    run = tmp_path / "run"
    assert main(["train", str(pipeline / "graphs"), "--out", str(run), "--split", "random-half"]
                + TRAIN_FLAGS) == 0
    assert {p.name for p in run.iterdir()} >= {"config.json", "model.sgsm", "train_log.jsonl", "split.json"}
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    assert main(["eval", str(run / "model.sgsm"), str(pipeline / "graphs"),
                 "--split-file", str(run / "split.json"), "--part", "test",
                 "--out", str(tmp_path / "m.json")]) == 0
    report = json.loads((tmp_path / "m.json").read_text())
    assert set(report["levels"]) == {"note", "onset", "beat"}
    for level in report["levels"].values():
        assert {"f1", "macro_f1", "precision", "recall"} <= set(level)
    assert main(["predict", str(run / "model.sgsm"), str(pipeline / "graphs"),
                 "--out", str(tmp_path / "p.tsv")]) == 0
    rows = (tmp_path / "p.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["node_id", "piece", "onset", "class", "probability"]
    n = sum(load_graph(p).n for p in (pipeline / "graphs").glob("*.sggr"))
    assert len(rows) == n + 1


def test_rerun_from_saved_config(pipeline, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", str(pipeline / "graphs"), "--out", str(a)] + TRAIN_FLAGS) == 0
    assert main(["train", str(pipeline / "graphs"), "--out", str(b),
                 "--config", str(a / "config.json")]) == 0
    assert (a / "model.sgsm").read_bytes() == (b / "model.sgsm").read_bytes()


def test_seed_twice_gives_identical_metrics(pipeline, tmp_path):
    outs = []
    for k in range(2):
        run = tmp_path / f"r{k}"
        assert main(["train", str(pipeline / "graphs"), "--out", str(run), "--seed", "7"]
                    + TRAIN_FLAGS) == 0
        m = tmp_path / f"m{k}.json"
        assert main(["eval", str(run / "model.sgsm"), str(pipeline / "graphs"), "--out", str(m)]) == 0
        outs.append(m.read_bytes())
    assert outs[0] == outs[1]


def test_eval_refuses_other_feature_set(pipeline, tmp_path):
    run = tmp_path / "run"
    assert main(["train", str(pipeline / "graphs"), "--out", str(run)] + TRAIN_FLAGS) == 0
    gen = tmp_path / "gen"
    assert main(["build", str(pipeline / "scores"), "--out", str(gen), "--feature-set", "general"]) == 0
    assert main(["eval", str(run / "model.sgsm"), str(gen)]) == 2


def test_missing_files_and_usage(tmp_path):
    assert main(["eval", str(tmp_path / "none.sgsm"), str(tmp_path)]) == 2
    assert main(["build", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train"]) == 1
    assert main(["frobnicate"]) == 1
