import json
from importlib import resources
from pathlib import Path

import pytest

from egcm.cli import main
from egcm.config import ConfigError, RunConfig, load_config, parse_ini, render_ini
from egcm.training import MetricsReport

SAMPLE = str(resources.files("egcm") / "data" / "sample_flows.csv")


def run(*argv):
    return main([str(a) for a in argv])


def test_build_graph_sample(tmp_path, capsys):
    assert run("build-graph", "--input", SAMPLE, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "benign=" in out and "attack=" in out and "edges: 200" in out
    assert (tmp_path / "graph.npz").exists() and (tmp_path / "manifest.json").exists()


def test_missing_label_column_exit_2(tmp_path, capsys):
    lines = Path(SAMPLE).read_text().splitlines()
    bad = tmp_path / "nolabel.csv"
    bad.write_text("\n".join(",".join(l.split(",")[:-1]) for l in lines) + "\n")
    assert run("build-graph", "--input", bad, "--out", tmp_path / "o") == 2
    assert "label" in capsys.readouterr().err


def test_missing_input_exit_2(tmp_path):
    assert run("train", "--input", tmp_path / "nope.csv", "--out", tmp_path) == 2


def test_train_baseline_label_and_defaults(tmp_path):
    assert run("train", "--input", SAMPLE, "--out", tmp_path / "b", "--epochs", 2, "--no-mixup", "--no-contrastive") == 0
    m = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert m["method"] == "E-GraphSAGE"
    assert run("train", "--input", SAMPLE, "--out", tmp_path / "d", "--epochs", 2) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    t = m["config"]["train"]
    assert m["method"] == "EG-ConMix"
    assert (t["mixup"]["alpha"], t["mixup"]["beta"], t["mixup"]["sigma"], t["contrastive"]["gamma"]) == (0.3, 0.2, 200, 10)
    header = (tmp_path / "d" / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,L_c,L_k,L,val_macro_f1"


def test_rerun_from_manifest_reproduces(tmp_path, capsys):
    assert run("train", "--input", SAMPLE, "--out", tmp_path / "a", "--epochs", 3, "--seed", 4) == 0
    assert run("rerun", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    assert "reproduced: yes" in capsys.readouterr().out
    assert (tmp_path / "a" / "checkpoint.egcm").read_bytes() == (tmp_path / "b" / "checkpoint.egcm").read_bytes()


def test_evaluate_outputs_roundtrip(tmp_path):
    assert run("train", "--input", SAMPLE, "--out", tmp_path / "t", "--epochs", 3) == 0
    assert run("evaluate", "--checkpoint", tmp_path / "t" / "checkpoint.egcm", "--data", SAMPLE, "--out", tmp_path / "e") == 0
    d = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert MetricsReport.from_dict(d).to_dict() == d
    assert (tmp_path / "e" / "metrics.csv").read_text().startswith("class,precision,recall,f1")


def test_evaluate_converged_synthetic_training_data(tmp_path, capsys):
    assert run("synth", "--n-flows", 400, "--attack-ratio", 0.1, "--separation", 6, "--feature-dim", 4, "--out", tmp_path / "s") == 0
    data = tmp_path / "s" / "flows.csv"
    assert run("train", "--input", data, "--out", tmp_path / "t", "--epochs", 60) == 0
    assert run("evaluate", "--checkpoint", tmp_path / "t" / "checkpoint.egcm", "--data", data, "--out", tmp_path / "e") == 0
    assert json.loads((tmp_path / "e" / "metrics.json").read_text())["macro_f1"] >= 0.99


def test_corrupted_checkpoint_exit_3(tmp_path):
    bad = tmp_path / "bad.egcm"
    bad.write_bytes(b"NOPE" + b"\0" * 32)
    assert run("evaluate", "--checkpoint", bad, "--data", SAMPLE, "--out", tmp_path) == 3


def test_nan_abort_exit_4(tmp_path, capsys):
    big = tmp_path / "big.csv"
    lines = Path(SAMPLE).read_text().splitlines()
    rows = [lines[0]]
    for l in lines[1:]:
        cells = l.split(",")
        cells[4] = "1e308" if cells[-1] == "1" else "-1e308"
        rows.append(",".join(cells))
    big.write_text("\n".join(rows) + "\n")
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nnormalization = minmax\n")
    code = run("train", "--config", cfg, "--input", big, "--out", tmp_path / "o", "--epochs", 2)
    assert code == 4
    assert "not finite" in capsys.readouterr().err


def test_synth_file_properties(tmp_path):
    assert run("synth", "--n-flows", 1000, "--attack-ratio", 0.1, "--out", tmp_path / "a") == 0
    assert run("synth", "--n-flows", 1000, "--attack-ratio", 0.1, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "flows.csv").read_bytes()
    assert a == (tmp_path / "b" / "flows.csv").read_bytes()
    lines = a.decode().splitlines()
    assert len(lines) == 1001
    assert sum(l.endswith(",1") for l in lines[1:]) == 100


def test_sweep_grid_rows(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nepochs = 1\nseeds = 0\n[model]\nhidden_dim = 4\n[sweep]\nsigmas = 0, 5\n")
    assert run("sweep", "--kind", "sigma", "--config", cfg, "--input", SAMPLE, "--out", tmp_path / "s") == 0
    rows = (tmp_path / "s" / "sweep_sigma.csv").read_text().splitlines()
    assert rows[0] == "fraction_or_sigma,seed_count,macro_f1_mean,macro_f1_std,wall_seconds"
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "5"]
    assert "result_digest" in json.loads((tmp_path / "s" / "manifest.json").read_text())


def test_show_config_defaults_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[mixup]\nsigma = 50\nalpha = 0.7\n")
    assert run("train", "--config", cfg, "--sigma", 300, "--show-config") == 0
    text = capsys.readouterr().out
    assert "sigma = 300" in text and "alpha = 0.7" in text
    assert "hidden_dim = 128" in text and "gamma = 10" in text and "theta = 1.0" in text
    assert "lr = 0.01" in text and "dropout = 0.2" in text


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[mixup]\nbogus = 1\n")
    assert run("train", "--config", cfg, "--input", SAMPLE) == 2


# ------------------------------------------------------------------ config


def test_ini_roundtrip():
    cfg = parse_ini(
        "[schema]\nlabel = Label\ncategorical = proto\nignored = ts\n[train]\nseeds = 1, 2\nepochs = 7\n"
        "[model]\nfanout = 5\n[run]\nseed = 3\nremap_range = 10.0.0.1, 10.0.0.9\n[sweep]\nfractions = 0.1, 0.5\n"
    )
    assert cfg.schema.label == "Label" and cfg.schema.kind("proto") == "categorical" and cfg.schema.kind("ts") == "ignored"
    assert cfg.train.seeds == (1, 2) and cfg.train.epochs == 7 and cfg.train.model.fanout == 5
    assert cfg.seed == 3 and cfg.remap_range == ("10.0.0.1", "10.0.0.9") and cfg.fractions == (0.1, 0.5)
    assert parse_ini(render_ini(cfg)).to_dict() == cfg.to_dict()
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[train]\nepochs = many\n", "[train]\nepochs = 0\n", "not ini"])
def test_ini_errors(text):
    with pytest.raises(ConfigError):
        parse_ini(text)


def test_load_config_from_manifest(tmp_path):
    cfg = parse_ini("[train]\nepochs = 9\n")
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"config": cfg.to_dict()}))
    assert load_config(p).train.epochs == 9
