import json

import pytest

from graphma.cli import main

TINY = {"seed": 4,
        "generator": {"num_graphs": 30, "nodes_min": 4, "nodes_max": 8},
        "model": {"num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 8, "pe_dim": 2},
        "train": {"epochs": 2, "batch_size": 8},
        "analysis": {"threshold": 50.0, "bins": 10}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    assert main(["gen", "--config", str(d / "cfg.json"), "--out", str(d / "data.jsonl")]) == 0
    assert main(["train", "--config", str(d / "cfg.json"), "--data", str(d / "data.jsonl"),
                 "--out", str(d / "run")]) == 0
    return d


def test_gen_writes_one_line_per_graph(workdir):
    lines = (workdir / "data.jsonl").read_text().splitlines()
    assert len(lines) == 30 and all(json.loads(x) for x in lines)


def test_gen_seed_flag_overrides_config(workdir, tmp_path):
    cfg = str(workdir / "cfg.json")
    main(["gen", "--config", cfg, "--out", str(tmp_path / "a.jsonl")])
    main(["gen", "--config", cfg, "--seed", "99", "--out", str(tmp_path / "b.jsonl")])
    main(["gen", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "c.jsonl")])
    a, b, c = ((tmp_path / f"{k}.jsonl").read_bytes() for k in "abc")
    assert a == c and a != b
    assert a == (workdir / "data.jsonl").read_bytes()


def test_train_outputs_and_epoch_flag(workdir, tmp_path):
    hist = (workdir / "run" / "history.csv").read_text().splitlines()
    assert len(hist) == 1 + 3
    summary = json.loads((workdir / "run" / "train_summary.json").read_text())
    assert summary["train"]["seed"] == 4 and summary["train"]["epochs"] == 2
    assert main(["train", "--config", str(workdir / "cfg.json"), "--data", str(workdir / "data.jsonl"),
                 "--epochs", "1", "--out", str(tmp_path / "r1")]) == 0
    assert len((tmp_path / "r1" / "history.csv").read_text().splitlines()) == 3


def test_capture_detect_heatmap(workdir, tmp_path):
    cfg, data = str(workdir / "cfg.json"), str(workdir / "data.jsonl")
    ck = str(workdir / "run" / "checkpoint")
    t, u = str(tmp_path / "t.macap"), str(tmp_path / "u.macap")
    assert main(["capture", "--config", cfg, "--data", data, "--checkpoint", ck, "--out", t]) == 0
    assert main(["capture", "--config", cfg, "--data", data, "--checkpoint", ck, "--untrained",
                 "--out", u]) == 0
    assert main(["detect", "--config", cfg, "--capture", t, "--base", u,
                 "--out", str(tmp_path / "det")]) == 0
    rep = json.loads((tmp_path / "det" / "report.json").read_text())
    assert rep["threshold"] == 50.0 and rep["base"]["run_id"] == "untrained"
    assert (tmp_path / "det" / "curves.svg").exists()
    assert main(["detect", "--capture", t, "--threshold", "7", "--out", str(tmp_path / "d2")]) == 0
    assert json.loads((tmp_path / "d2" / "report.json").read_text())["threshold"] == 7.0
    assert main(["heatmap", "--capture", t, "--report", str(tmp_path / "det" / "report.json"),
                 "--out", str(tmp_path / "hm")]) == 0
    hs = json.loads((tmp_path / "hm" / "heatmap_summary.json").read_text())
    assert hs["threshold"] == 50.0
    for f in hs["files"]:
        assert (tmp_path / "hm" / f).exists()
    # reruns are byte-identical
    t2 = str(tmp_path / "t2.macap")
    main(["capture", "--config", cfg, "--data", data, "--checkpoint", ck, "--out", t2])
    assert open(t, "rb").read() == open(t2, "rb").read()


def test_exit_codes(workdir, tmp_path, capsys):
    data = str(workdir / "data.jsonl")
    assert main(["nope"]) == 1
    assert main(["train", "--data", data]) == 1
    assert main(["capture", "--data", data, "--out", str(tmp_path / "x")]) == 1
    assert main(["detect", "--capture", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    good = workdir / "trunc_src.macap"
    main(["capture", "--config", str(workdir / "cfg.json"), "--data", data, "--untrained",
          "--max-graphs", "3", "--out", str(good)])
    raw = good.read_bytes()
    (tmp_path / "trunc.macap").write_bytes(raw[:-5])
    capsys.readouterr()
    assert main(["detect", "--capture", str(tmp_path / "trunc.macap"), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "file ends at offset" in err and len(err.strip().splitlines()) == 1
    (tmp_path / "bad.json").write_text("{oops")
    assert main(["gen", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "g")]) == 2
    (tmp_path / "bad2.json").write_text(json.dumps({"modle": {}}))
    assert main(["train", "--config", str(tmp_path / "bad2.json"), "--data", data,
                 "--out", str(tmp_path / "r")]) == 2
    assert main(["detect", "--capture", str(good), "--threshold", "1", "--out", str(tmp_path)]) == 2
