import csv
import io
import json
import os
import subprocess
import sys

import pytest

from ppvar.cli import main
from ppvar.fileio import bundled_path

TOY = str(bundled_path("bernoulli_toy"))


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


# ---------------------------------------------------------------- enumerate


def test_enumerate_two(capsys, tmp_path):
    code, out, _ = run(capsys, "enumerate", "-k", "2", "--out", str(tmp_path))
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "5"
    assert [line.split()[0] for line in lines[1:]] == ["1", "2", "1|2", "1,2", "2|1"]
    assert (tmp_path / "plans.csv").exists() and (tmp_path / "manifest.json").exists()


def test_enumerate_one(capsys, tmp_path):
    code, out, _ = run(capsys, "enumerate", "-k", "1", "--out", str(tmp_path))
    assert code == 0 and out.splitlines()[0] == "1"


def test_enumerate_three_json(capsys, tmp_path):
    code, out, _ = run(capsys, "enumerate", "-k", "3", "--format", "json", "--out", str(tmp_path))
    assert code == 0
    assert len(json.loads(out)["plans"]) == 25


@pytest.mark.parametrize("k", ["0", "7"])
def test_enumerate_bad_k(capsys, tmp_path, k):
    code, _, err = run(capsys, "enumerate", "-k", k, "--out", str(tmp_path))
    assert code == 2 and "K must be" in err


# ---------------------------------------------------------------- decompose


def test_decompose_toy(capsys, tmp_path):
    code, out, _ = run(capsys, "decompose", "--model", TOY, "--plan", "1", "--out", str(tmp_path))
    assert code == 0
    values = [float(r["value"]) for r in rows(out)]
    assert values == pytest.approx([0.2, 0.04], abs=1e-12)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["inputs"]["model"]["path"] == TOY
    assert manifest["seed"] == 20240607


def test_decompose_bundled_normal_normal(capsys, tmp_path):
    code, out, _ = run(capsys, "decompose", "--model", "normal_normal", "--data", "normal_normal.csv",
                       "--plan", "1", "--out", str(tmp_path))
    assert code == 0
    assert [float(r["value"]) for r in rows(out)] == pytest.approx([1.0, 0.2], abs=1e-12)


def test_decompose_mc_rerun_is_byte_identical(capsys, tmp_path):
    args = ["decompose", "--model", TOY, "--plan", "1", "--engine", "mc", "--seed", "7",
            "--budget", "512x64"]
    c1, out1, _ = run(capsys, *args, "--out", str(tmp_path / "a"))
    c2, out2, _ = run(capsys, *args, "--out", str(tmp_path / "b"))
    assert c1 == c2 == 0
    assert out1 == out2
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_decompose_json_format(capsys, tmp_path):
    code, out, _ = run(capsys, "decompose", "--model", TOY, "--plan", "1", "--format", "json",
                       "--out", str(tmp_path))
    doc = json.loads(out)
    assert code == 0 and doc["total"] == pytest.approx(0.24)


def test_decompose_plan_syntax_error(capsys, tmp_path):
    code, _, err = run(capsys, "decompose", "--model", TOY, "--plan", "1||", "--out", str(tmp_path))
    assert code == 2 and "position" in err


def test_decompose_plan_for_wrong_k(capsys, tmp_path):
    code, _, _ = run(capsys, "decompose", "--model", TOY, "--plan", "1|2", "--out", str(tmp_path))
    assert code == 2


def test_decompose_spec_error_has_location(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(open(TOY).read().replace('"p": 0.6', '"p": 2.5'))
    code, _, err = run(capsys, "decompose", "--model", str(bad), "--plan", "1", "--out", str(tmp_path))
    assert code == 2
    assert f"{bad}:" in err and "components[1].params" in err


def test_decompose_data_error_has_line(capsys, tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("y\n1\nx\n")
    code, _, err = run(capsys, "decompose", "--model", TOY, "--data", str(data), "--plan", "1",
                       "--out", str(tmp_path))
    assert code == 2 and f"{data}:3:" in err


def test_decompose_impossible_data_is_usage_error(capsys, tmp_path):
    model = tmp_path / "m.json"
    model.write_text(json.dumps({
        "factors": [{"name": "m", "levels": ["a"]}],
        "backend": {"family": "bernoulli-fixed", "params": {"p": 0.0}},
    }))
    data = tmp_path / "d.csv"
    data.write_text("y\n1\n")
    code, _, err = run(capsys, "decompose", "--model", str(model), "--data", str(data), "--plan", "1",
                       "--out", str(tmp_path))
    assert code == 2 and "incompatible" in err


def test_bad_budget_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["decompose", "--model", TOY, "--plan", "1", "--budget", "10x1", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_conservation_failure_exit_code(capsys, tmp_path, monkeypatch):
    import ppvar.cli as cli
    from ppvar.decomp import DecompositionResult

    real = cli.decompose_exact

    def broken(*a, **k):
        res = real(*a, **k)
        return DecompositionResult(res.plan, res.terms[:1], res.total)

    monkeypatch.setattr(cli, "decompose_exact", broken)
    code, _, err = run(capsys, "decompose", "--model", TOY, "--plan", "1", "--out", str(tmp_path))
    assert code == 1 and "conservation" in err


# ----------------------------------------------------------------- examples


def test_example_beta_binomial(capsys, tmp_path):
    code, out, err = run(capsys, "example", "beta-binomial", "--m", "30", "--a", "1", "--b", "1",
                         "--out", str(tmp_path))
    assert code == 0
    assert [float(r["value"]) for r in rows(out)] == pytest.approx([5.0, 75.0], rel=1e-12)
    assert "var_e_dominates: true" in err
    summary = json.loads((tmp_path / "manifest.json").read_text())["summary"]
    assert summary["var_e_dominates"] is True


def test_example_normal_normal(capsys, tmp_path):
    code, out, _ = run(capsys, "example", "normal-normal", "--out", str(tmp_path))
    assert code == 0
    assert [float(r["value"]) for r in rows(out)] == pytest.approx([1.0, 0.2], rel=1e-12)


def test_example_bma_equivalence(capsys, tmp_path):
    code, out, _ = run(capsys, "example", "bma-equivalence", "--seed", "3", "--out", str(tmp_path))
    assert code == 0
    totals = {r["form"]: float(r["form_total"]) for r in rows(out)}
    assert set(totals) == {"model-index", "joint", "nested"}
    vals = list(totals.values())
    assert max(vals) - min(vals) <= 1e-10 * max(1.0, max(vals))


def test_example_challenger_laplace(capsys, tmp_path):
    code, out, _ = run(capsys, "example", "challenger", "--method", "laplace", "--out", str(tmp_path))
    assert code == 0
    assert len(rows(out)) == 3
    models = rows((tmp_path / "models.csv").read_text())
    assert len(models) == 24 and models[0]["model"] == "m1"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["method"] == "laplace"
    assert "restricted.csv" in manifest["outputs"]
    assert "flagged_terms" in manifest["summary"]


def test_unknown_example(capsys, tmp_path):
    code, _, err = run(capsys, "example", "oil", "--out", str(tmp_path))
    assert code == 2 and "challenger" in err


# -------------------------------------------------------------------- sweep


def test_sweep_small_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_grid": [25, 50, 100, 200, 400], "replicates": 1}))
    args = ["sweep", "--config", str(cfg), "--seed", "11"]
    code, out, _ = run(capsys, *args, "--out", str(tmp_path / "a"))
    assert code == 0
    props = rows((tmp_path / "a" / "curves_proportions.csv").read_text())
    vals = rows((tmp_path / "a" / "curves_values.csv").read_text())
    assert len(props) == len(vals) == 5
    for r in props:
        assert sum(float(r[k]) for k in ("predictions", "models", "links")) == pytest.approx(1.0, abs=1e-9)
    long = rows((tmp_path / "a" / "sweep.csv").read_text())
    assert list(long[0]) == ["n", "replicate", "term_label", "value", "proportion"]
    assert len(long) == 15
    run(capsys, *args, "--out", str(tmp_path / "b"))
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_sweep_bad_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"n_grid": [50, 25]}')
    code, _, err = run(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 2 and "increasing" in err
    cfg.write_text('{"replicates": 2,\n "colour": 1}')
    code, _, err = run(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 2 and "colour" in err


def test_sweep_failure_fraction_exit_code(capsys, tmp_path, monkeypatch):
    import ppvar.experiments as ex

    def failing(config, n, replicate):
        return ex.ReplicateOutcome(n, replicate, None, None, "SaddlePointError: forced")

    monkeypatch.setattr(ex, "run_replicate", failing)
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"n_grid": [25], "replicates": 2}')
    code, _, err = run(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 1 and "2 of 2 replicates failed" in err
    assert (tmp_path / "failures.csv").exists()


# -------------------------------------------------------------- entry point


def test_console_script_runs(tmp_path):
    env = dict(os.environ, SOURCE_DATE_EPOCH="0")
    proc = subprocess.run(
        [sys.executable, "-m", "ppvar.cli", "enumerate", "-k", "2", "--out", str(tmp_path)],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "5"
