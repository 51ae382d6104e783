import csv
from collections import OrderedDict

import pytest

from himemformer import cli, gradcheck
from himemformer.config import load_config, serialize_config, toy_config


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(serialize_config(toy_config(train_episodes=3, eval_episodes=2)))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_generate_is_deterministic(tmp_path, toy_cfg):
    for d in ("a", "b"):
        assert run("generate", "--scenario", "2x1", "--out", tmp_path / d, "--config", toy_cfg, "--seed", 5) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.hme"))
    assert len(files) == 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert load_config(tmp_path / "a" / "config.resolved").data_seed == 5


def test_train_then_eval(tmp_path, toy_cfg, capsys):
    data = tmp_path / "data"
    assert run("generate", "--scenario", "2x1", "--out", data, "--config", toy_cfg) == 0
    ckpt = tmp_path / "run" / "model.hmf"
    assert run("train", "--data", data, "--out", ckpt, "--config", toy_cfg, "--max-steps", 3) == 0
    assert ckpt.exists()
    curve = (tmp_path / "run" / "model.loss.csv").read_text().splitlines()
    assert curve[0] == "step,loss_coarse,loss_fine,total" and len(curve) == 4
    assert (tmp_path / "run" / "config.resolved").exists()
    report = tmp_path / "out" / "report.csv"
    assert run("eval", "--ckpt", ckpt, "--data", data, "--report", report) == 0
    rows = list(csv.DictReader(report.open()))
    assert rows and {r["scenario"] for r in rows} == {"2x1"}
    assert (tmp_path / "out" / "report.offsets.csv").exists()
    assert (tmp_path / "out" / "config.resolved").exists()
    assert "mAP" in capsys.readouterr().out


def test_train_emit_plot(tmp_path, toy_cfg):
    pytest.importorskip("matplotlib")
    data = tmp_path / "data"
    run("generate", "--scenario", "1x1", "--out", data, "--config", toy_cfg)
    ckpt = tmp_path / "m.hmf"
    assert run("train", "--data", data, "--out", ckpt, "--config", toy_cfg, "--max-steps", 2, "--emit-plot") == 0
    assert (tmp_path / "m.loss.svg").read_text().lstrip().startswith("<?xml")


def test_eval_class_count_mismatch(tmp_path, toy_cfg, capsys):
    data3, data4 = tmp_path / "k3", tmp_path / "k4"
    run("generate", "--scenario", "2x1", "--out", data3, "--config", toy_cfg)
    run("generate", "--scenario", "2x1", "--out", data4, "--config", toy_cfg, "--set", "K=4")
    ckpt = tmp_path / "m.hmf"
    run("train", "--data", data3, "--out", ckpt, "--config", toy_cfg, "--max-steps", 1)
    capsys.readouterr()
    code = run("eval", "--ckpt", ckpt, "--data", data4, "--report", tmp_path / "r.csv")
    err = capsys.readouterr().err
    assert code == cli.EXIT_DATA
    assert "K=4" in err and "K=3" in err


def test_missing_inputs(tmp_path, capsys):
    assert run("eval", "--ckpt", tmp_path / "none.hmf", "--data", tmp_path, "--report", tmp_path / "r.csv") != 0
    assert run("train", "--data", tmp_path, "--out", tmp_path / "m.hmf") == cli.EXIT_DATA
    assert "error" in capsys.readouterr().err


def test_config_errors_exit_usage(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("m_L = 5\nm_S = 10\n")
    assert run("generate", "--scenario", "1x1", "--out", tmp_path / "d", "--config", bad) == cli.EXIT_USAGE
    assert "line 2" in capsys.readouterr().err
    assert run("generate", "--scenario", "1x1", "--out", tmp_path / "d", "--set", "nope=1") == cli.EXIT_USAGE


def test_argument_errors_exit_usage():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["ablate", "--axis", "depth"])
    assert exc.value.code == cli.EXIT_USAGE


def test_ablate_marks_infeasible_cells(tmp_path, toy_cfg, capsys):
    out = tmp_path / "grid.csv"
    assert run("ablate", "--axis", "ms", "--out", out, "--config", toy_cfg, "--scenarios", "2x1",
               "--max-steps", 1) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["value"] for r in rows] == ["2.0", "5.0", "10.0"]
    assert rows[0]["2x1"] and not rows[0]["reason"]
    assert rows[2]["2x1"] == "" and "short_span" in rows[2]["reason"]
    assert (tmp_path / "config.resolved").exists()


def test_gradcheck_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(gradcheck, "run_suite", lambda seed: OrderedDict(matmul=1e-9, model=2e-6))
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "matmul" in out and "max" in out
    monkeypatch.setattr(gradcheck, "run_suite", lambda seed: OrderedDict(model=3e-3))
    assert run("gradcheck") == cli.EXIT_NUMERIC
