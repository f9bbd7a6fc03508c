import csv
import json

import numpy as np
import pytest

from trifocal_nav.cli import main
from trifocal_nav.files import RESULT_COLUMNS, SUMMARY_COLUMNS

SHORT = {"trajectory": {"duration": 30.0, "revisit_times": []},
         "schedule": {"mode": "sequential", "loop_t3": [20.0]},
         "report_epochs": [15.0, 25.0], "n_features": 15, "runs": 2,
         "feature_counts": [5, 10]}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SHORT, indent=2))
    return p


def table(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_simulate_writes_outputs_deterministically(tmp_path, cfg_file, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(a), "--seed", "5"]) == 0
    assert main(["simulate", "--config", str(cfg_file), "--out", str(b), "--seed", "5"]) == 0
    assert "outputs written" in capsys.readouterr().out
    for name in ("results.csv", "summary.csv", "epoch_summary.csv", "metadata.json",
                 "config_effective.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    header, rows = table(a / "results.csv")
    assert tuple(header) == RESULT_COLUMNS and len(rows) == 31 * 3
    assert tuple(table(a / "summary.csv")[0]) == SUMMARY_COLUMNS
    meta = json.loads((a / "metadata.json").read_text())
    assert meta["seed"] == 5 and meta["command"] == "simulate" and meta["version"]
    assert json.loads((a / "config_effective.json").read_text())["seed"] == 5


def test_method_selection(tmp_path, cfg_file):
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(out),
                 "--method", "trifocal", "--method", "ins"]) == 0
    _, rows = table(out / "results.csv")
    assert {r[1] for r in rows} == {"trifocal", "ins"}


def test_export_and_replay_reproduce_results(tmp_path, cfg_file):
    sim, bundle, rep = tmp_path / "sim", tmp_path / "bundle", tmp_path / "rep"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(sim),
                 "--export", str(bundle)]) == 0
    assert main(["replay", "--config", str(cfg_file), "--out", str(rep),
                 "--bundle", str(bundle)]) == 0
    h1, r1 = table(sim / "results.csv")
    h2, r2 = table(rep / "results.csv")
    assert h1 == h2 and len(r1) == len(r2)
    a = np.array([[float(x) for x in r[2:]] for r in r1])
    b = np.array([[float(x) for x in r[2:]] for r in r2])
    assert [r[:2] for r in r1] == [r[:2] for r in r2]
    assert np.abs(a - b).max() <= 1e-12
    assert (rep / "summary.csv").is_file()


def test_replay_without_truth_has_no_summary(tmp_path, cfg_file):
    sim, bundle, rep = tmp_path / "sim", tmp_path / "bundle", tmp_path / "rep"
    main(["simulate", "--config", str(cfg_file), "--out", str(sim), "--export", str(bundle)])
    (bundle / "groundtruth.csv").unlink()
    assert main(["replay", "--config", str(cfg_file), "--out", str(rep),
                 "--bundle", str(bundle), "--method", "ins"]) == 0
    _, rows = table(rep / "results.csv")
    assert rows and all(r[2] == "nan" for r in rows)
    assert not (rep / "summary.csv").exists()


def test_montecarlo_and_featurestudy(tmp_path, cfg_file):
    mc, fs = tmp_path / "mc", tmp_path / "fs"
    assert main(["montecarlo", "--config", str(cfg_file), "--out", str(mc), "--runs", "2",
                 "--method", "trifocal"]) == 0
    header, rows = table(mc / "nees.csv")
    assert header == ["method", "t_s", "mean_nees", "lower_99", "upper_99"] and len(rows) == 2
    header, rows = table(mc / "epoch_summary.csv")
    assert [r[1] for r in rows] == ["15", "25"]
    assert main(["featurestudy", "--config", str(cfg_file), "--out", str(fs), "--runs", "1"]) == 0
    header, rows = table(fs / "featurestudy.csv")
    assert [r[0] for r in rows] == ["5", "10"]


def test_bad_inputs_exit_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "camera": {"focal": -3}\n}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "camera.focal" in capsys.readouterr().err
    bad.write_text('{\n  "seed": 1,\n  "colour": 2\n}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["replay", "--out", str(tmp_path / "o"), "--bundle", str(tmp_path / "none")]) == 2
    with pytest.raises(SystemExit):
        main(["simulate"])
