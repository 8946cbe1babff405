import csv
import json
import subprocess
import sys

import pytest

from microadam.cli import main


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def test_run_writes_one_row_per_step(tmp_path):
    out = tmp_path / "t.csv"
    code = main(["run", "--problem", "rosenbrock", "--optimizer", "microadam", "--steps", "500",
                 "--seed", "7", "--out", str(out)])
    assert code == 0
    rows = read_rows(out)
    assert rows[0] == ["step", "loss", "grad_norm", "error_norm", "update_nnz", "theta0", "theta1"]
    assert len(rows) == 501
    assert all(len(r) == 5 + 2 for r in rows)
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 501))


def test_run_is_byte_identical(tmp_path):
    args = ["run", "--problem", "logistic", "--optimizer", "microadam", "--steps", "50",
            "--rounding", "stochastic", "--k", "2", "--noise", "0.1", "--seed", "3"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_microadam_beats_topk_adam_on_rosenbrock(tmp_path):
    finals = {}
    for opt in ("topk_adam", "microadam"):
        out = tmp_path / f"{opt}.csv"
        assert main(["run", "--optimizer", opt, "--steps", "500", "--k", "1", "--out", str(out)]) == 0
        finals[opt] = float(read_rows(out)[-1][1])
    assert finals["microadam"] < finals["topk_adam"]


def test_unknown_names_exit_2(tmp_path, capsys):
    assert main(["run", "--optimizer", "sgd", "--out", str(tmp_path / "x.csv")]) == 2
    assert "unknown optimizer" in capsys.readouterr().err
    assert main(["run", "--problem", "nope", "--out", str(tmp_path / "x.csv")]) == 2
    assert main(["run", "--k", "5", "--out", str(tmp_path / "x.csv")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 2


def test_divergence_exit_3_with_partial_csv(tmp_path):
    out = tmp_path / "d.csv"
    code = main(["run", "--problem", "quadratic", "--optimizer", "adam", "--lr", "1e9",
                 "--steps", "100", "--out", str(out)])
    assert code == 3
    text = out.read_text()
    assert text.splitlines()[-1].startswith("# DIVERGED")
    assert text.splitlines()[0].startswith("step,loss")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"problem": "quadratic", "optimizer": "adam", "steps": 7, "lr": 0.1}))
    out = tmp_path / "c.csv"
    assert main(["run", "--config", str(cfg), "--steps", "3", "--out", str(out)]) == 0
    assert len(read_rows(out)) == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["run", "--config", str(bad)]) == 2


def test_default_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("MICROADAM_OUT_DIR", str(tmp_path / "runs"))
    assert main(["run", "--optimizer", "adam", "--steps", "5", "--seed", "2"]) == 0
    assert (tmp_path / "runs" / "rosenbrock_adam_seed2.csv").exists()


def test_sweep_parallel_matches_serial(tmp_path):
    base = ["run", "--problem", "quadratic", "--optimizer", "microadam", "--k", "1", "--steps", "20",
            "--sweep", "lr=0.01,0.1", "--sweep", "seed=0,1"]
    assert main(base + ["--out", str(tmp_path / "p.csv"), "--jobs", "2"]) == 0
    assert main(base + ["--out", str(tmp_path / "s" / "p.csv")]) == 0
    made = sorted(p.name for p in tmp_path.glob("p_*.csv"))
    assert len(made) == 4
    for name in made:
        assert (tmp_path / name).read_bytes() == (tmp_path / "s" / name).read_bytes()


def test_memory_table(capsys):
    assert main(["memory", "--model", "llama2-7b"]) == 0
    out = capsys.readouterr().out
    for value in ("50.21", "25.10", "12.55", "5.65", "1.36", "5.43", "2.04", "8.15"):
        assert value in out
    assert main(["memory", "--d", "100", "--m", "0", "--k", "1", "--format", "csv"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["optimizer", "bytes", "GB"]
    assert ["MicroAdam(m=0)", "50", "0.00"] in rows
    assert main(["memory", "--model", "llama2-7b", "--galore", "--rank", "256", "--bits", "8",
                 "--format", "csv"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[1:] == [["GaLore-AdamW-8bit(r=256)", "1458577408", "1.36"]]
    assert main(["memory", "--d", "100", "--galore"]) == 2


def test_constants_table(capsys):
    assert main(["constants", "--q", "0", "--omega", "0", "--G", "1", "--eps", "1e-8", "--format", "csv"]) == 0
    vals = dict(csv.reader(capsys.readouterr().out.splitlines()[1:]))
    assert float(vals["C2"]) == 0.0
    assert main(["constants", "--k", "1", "--d", "100", "--omega", "0", "--G", "1", "--eps", "1e-8",
                 "--format", "csv"]) == 0
    vals = dict(csv.reader(capsys.readouterr().out.splitlines()[1:]))
    assert float(vals["C0"]) == pytest.approx(561.4480919907106, rel=1e-12)
    assert main(["constants", "--q", "0.9", "--omega", "0.2"]) == 2
    err = capsys.readouterr().err
    assert "1.08" in err and "(1+omega)*q < 1" in err
    assert main(["constants", "--k", "8", "--d", "16", "--bits", "4", "--n", "16"]) == 0
    assert main(["constants"]) == 2


def test_ef_lowrank_csv(tmp_path):
    out = tmp_path / "ef.csv"
    assert main(["ef-lowrank", "--rank", "4", "--t-sub", "0", "--steps", "50", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["step", "loss", "grad_norm", "error_norm", "proj_error_norm"]
    assert len(rows) == 51
    assert all(float(r[4]) < 1e-8 * float(r[3]) for r in rows[1:])
    assert main(["ef-lowrank", "--rank", "40"]) == 2


def test_checkpoint_and_inspect(tmp_path, capsys):
    ck = tmp_path / "state.madm"
    assert main(["run", "--optimizer", "microadam", "--k", "1", "--steps", "12",
                 "--out", str(tmp_path / "r.csv"), "--checkpoint", str(ck)]) == 0
    assert ck.read_bytes()[:4] == b"MADM"
    capsys.readouterr()
    assert main(["inspect", str(ck), "--format", "csv"]) == 0
    fields = dict(csv.reader(capsys.readouterr().out.splitlines()[1:]))
    assert fields["step"] == "12" and fields["window"] == "10" and fields["filled"] == "10"
    assert main(["inspect", str(tmp_path / "r.csv")]) == 2
    assert main(["run", "--optimizer", "adam", "--checkpoint", str(ck)]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "microadam", "memory", "--d", "100", "--m", "0", "--k", "1"],
                         capture_output=True, text=True, check=True)
    assert "MicroAdam(m=0)" in res.stdout
