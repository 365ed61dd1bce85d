import json
import subprocess
import sys

import numpy as np
import pytest

from blbf import estimators as est
from blbf.cli import main, summary_path
from blbf.data import LoggedData
from blbf.logformat import read_log
from blbf.simulator import GroundTruthModel, WorldConfig, read_key_values


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_tsv(text):
    lines = [l for l in text.splitlines() if l]
    header = lines[0].split("\t")
    return [dict(zip(header, l.split("\t"))) for l in lines[1:]]


@pytest.fixture(scope="module")
def small_log(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    cfg = write(d / "world.cfg", "# small world\nimpression_count=1000\npool_size_min=4\n"
                                 "pool_size_max=6\n")
    log = str(d / "a.log")
    assert main(["generate", "--config", cfg, "--seed", "7", "--output", log]) == 0
    return d, cfg, log


@pytest.fixture(scope="module")
def learn_log(tmp_path_factory):
    d = tmp_path_factory.mktemp("learn")
    cfg = write(d / "world.cfg", "impression_count=300\nbase_click_rate=0.3\n")
    log = str(d / "l.log")
    assert main(["generate", "--config", cfg, "--seed", "1", "--output", log]) == 0
    learn_cfg = write(d / "learn.cfg", "grid.epochs=2\ngrid.lasso=1e-6\ngrid.learning_rate=1\n"
                                       "grid.poem_clip=100\ngrid.poem_learning_rate=10\n"
                                       "grid.poem_variance_reg=0.001\ngrid.poem_l2=1e-6\n"
                                       "learn.hash_bits=12\nlearn.crosses=3x6\n")
    return d, learn_cfg, log


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_log_and_summary(small_log, capsys):
    d, cfg, log = small_log
    summary = read_key_values(summary_path(log))
    assert summary["n_total"] == "1000" and summary["model_seed"] == "7"
    assert summary["world.impression_count"] == "1000"
    records = read_log(log)
    assert len(records) == int(summary["n_kept"])
    assert int(summary["n_clicked"]) == sum(r.was_ad_clicked for r in records)


def test_generate_is_deterministic(small_log, tmp_path):
    d, cfg, log = small_log
    other = str(tmp_path / "b.log")
    assert main(["generate", "--config", cfg, "--seed", "7", "--output", other]) == 0
    assert open(log, "rb").read() == open(other, "rb").read()
    assert open(summary_path(log), "rb").read() == open(summary_path(other), "rb").read()


@pytest.mark.slow
def test_generate_kept_count_reconstructs_total(tmp_path, capsys):
    log = str(tmp_path / "big.log.gz")
    cfg = write(tmp_path / "big.cfg", "impression_count=200000\n")
    assert main(["generate", "--config", cfg, "--seed", "3", "--output", log]) == 0
    capsys.readouterr()
    config = WorldConfig.from_mapping({k[6:]: v for k, v in read_key_values(
        summary_path(log)).items() if k.startswith("world.")})
    data = LoggedData.from_records(read_log(log), config.subsample_keep_prob)
    assert config.impression_count == 200000
    assert abs(data.sampling_weight.sum() - 200000) <= 0.02 * 200000


# ---------------------------------------------------------------------------
# validate / diagnose


def test_validate_clean_log(small_log, capsys):
    code, out, _ = run(capsys, "validate", "--input", small_log[2])
    assert code == 0
    assert "propensity_mismatches=0" in out


def test_diagnose_default_grid(small_log, capsys):
    code, out, _ = run(capsys, "diagnose", "--input", small_log[2])
    assert code == 0
    stats_text, sweep_text = out.split("\n\n")
    rows = parse_tsv(sweep_text)
    assert len(rows) == 12
    assert [float(r["epsilon"]) for r in rows] == list(est.DEFAULT_EPS_GRID)
    assert float(rows[0]["c_hat"]) == 1.0 and float(rows[0]["c_hat_hw"]) == 0.0
    assert parse_tsv(stats_text)[0]["nb_slots"] == "1"


def test_diagnose_tsv_round_trips_library_values(small_log, capsys):
    d, cfg, log = small_log
    _, out, _ = run(capsys, "diagnose", "--input", log)
    rows = parse_tsv(out.split("\n\n")[1])
    config = WorldConfig.from_mapping({k[6:]: v for k, v in read_key_values(
        summary_path(log)).items() if k.startswith("world.")})
    replica = GroundTruthModel.from_config(config).logging_policy(config.logging_temperature)
    data = LoggedData.from_records(read_log(log), config.subsample_keep_prob)
    reports = est.diagnostic_sweep(data, replica, est.DEFAULT_EPS_GRID)
    for row, rep in zip(rows, reports):
        assert float(row["c_hat"]) == pytest.approx(rep.cHat, rel=1e-11)
        assert float(row["ips_x1e4"]) == pytest.approx(1e4 * rep.ips, rel=1e-11)
        assert float(row["snips_hw_x1e4"]) == pytest.approx(
            1e4 * rep.snips_halfwidth, rel=1e-11)


def test_diagnose_jsonl_and_custom_grid(small_log, tmp_path, capsys):
    cfg = write(tmp_path / "eps.cfg", "eps_grid=0, 0.5\n")
    code, out, _ = run(capsys, "diagnose", "--input", small_log[2], "--config", cfg,
                       "--format", "jsonl")
    assert code == 0
    objs = [json.loads(l) for l in out.splitlines() if l.strip()]
    assert sum("epsilon" in o for o in objs) == 2


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_logging_replica_and_uniform(small_log, tmp_path, capsys):
    log = small_log[2]
    code, out, _ = run(capsys, "evaluate", "--input", log, "--policy", "logging")
    assert code == 0
    row = parse_tsv(out)[0]
    assert float(row["c_hat"]) == 1.0
    pfile = write(tmp_path / "rep.policy", "kind=logging\n")
    code, out2, _ = run(capsys, "evaluate", "--input", log, "--policy", pfile)
    assert code == 0 and parse_tsv(out2)[0]["c_hat"] == row["c_hat"]
    code, out, _ = run(capsys, "evaluate", "--input", log, "--policy", "uniform")
    assert code == 0
    row = parse_tsv(out)[0]
    assert all(np.isfinite(float(row[c])) for c in ("ips_hw_x1e4", "snips_hw_x1e4", "c_hat_hw"))


def test_evaluate_matches_diagnose_bitwise(small_log, tmp_path, capsys):
    log = small_log[2]
    pfile = write(tmp_path / "mix.policy",
                  "kind=epsilon_mixture\nepsilon=0.25\nbase.kind=logging\n")
    _, out, _ = run(capsys, "evaluate", "--input", log, "--policy", pfile)
    ev = parse_tsv(out)[0]
    _, diag, _ = run(capsys, "diagnose", "--input", log)
    (sw,) = [r for r in parse_tsv(diag.split("\n\n")[1]) if r["epsilon"] == "0.25"]
    assert {k: v for k, v in ev.items() if k != "policy"} == \
        {k: v for k, v in sw.items() if k != "epsilon"}


# ---------------------------------------------------------------------------
# learn


def test_learn_smoke_and_rerun(learn_log, tmp_path, capsys):
    d, cfg, log = learn_log
    code, out, err = run(capsys, "learn", "--input", log, "--config", cfg, "--seed", "4",
                         "--policy-dir", tmp_path / "pol")
    assert code == 0, err
    rows = parse_tsv(out)
    assert [r["method"] for r in rows] == ["random", "logging", "regression", "ips", "dro",
                                           "poem"]
    _, again, _ = run(capsys, "learn", "--input", log, "--config", cfg, "--seed", "4")
    assert again == out
    code, ev, _ = run(capsys, "evaluate", "--input", log, "--policy", tmp_path / "pol" /
                      "poem.policy")
    assert code == 0 and len(parse_tsv(ev)) == 1


# ---------------------------------------------------------------------------
# exit codes


def test_exit_config_errors(tmp_path, capsys):
    assert run(capsys, "generate", "--output", tmp_path / "x.log")[0] == 2  # no seed
    bad = write(tmp_path / "bad.cfg", "no_such_key=1\n")
    assert run(capsys, "generate", "--config", bad, "--seed", "1",
               "--output", tmp_path / "x.log")[0] == 2
    assert run(capsys, "generate", "--config", tmp_path / "missing.cfg", "--seed", "1",
               "--output", tmp_path / "x.log")[0] == 2


def test_exit_io_errors(small_log, tmp_path, capsys):
    assert run(capsys, "validate", "--input", tmp_path / "none.log")[0] == 3
    assert run(capsys, "generate", "--seed", "1", "--output",
               tmp_path / "no" / "dir" / "x.log")[0] == 3
    garbage = write(tmp_path / "g.log", "this is not a log\n")
    assert run(capsys, "validate", "--input", garbage)[0] == 3


def test_exit_missing_artifacts(small_log, tmp_path, capsys):
    orphan = tmp_path / "orphan.log"
    orphan.write_bytes(open(small_log[2], "rb").read())
    assert run(capsys, "diagnose", "--input", orphan)[0] == 4
    assert run(capsys, "evaluate", "--input", small_log[2], "--policy",
               tmp_path / "nope.policy")[0] == 4
    junk = write(tmp_path / "junk.policy", "kind=linear\n")
    assert run(capsys, "evaluate", "--input", small_log[2], "--policy", junk)[0] == 4


def test_exit_protocol_violations(tmp_path, capsys):
    cfg = write(tmp_path / "two.cfg", "impression_count=300\nnb_slots=2\npool_size_min=3\n"
                                      "pool_size_max=4\n")
    log = str(tmp_path / "two.log")
    assert run(capsys, "generate", "--config", cfg, "--seed", "2", "--output", log)[0] == 0
    assert run(capsys, "learn", "--input", log, "--strict")[0] == 5
    lines = open(log, encoding="utf-8").read().split("\n")
    header = lines[0].split(" ")
    header[4] = repr(float(header[4]) * 0.5)  # corrupt one logged propensity
    lines[0] = " ".join(header)
    write(tmp_path / "two.log", "\n".join(lines))
    assert run(capsys, "validate", "--input", log)[0] == 5


def test_console_entry_point(small_log):
    proc = subprocess.run([sys.executable, "-m", "blbf.cli", "validate", "--input",
                           small_log[2]], capture_output=True, text=True)
    assert proc.returncode == 0 and "records=" in proc.stdout
