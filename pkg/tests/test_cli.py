import csv
import json
import time

import numpy as np
import pytest

from trail.cli import main
from trail.config import ConfigError, ExperimentConfig, from_dict, load_config
from trail.hsmm import QualityHsmm, default_model
from trail.scheduler import SchedulingInstance, greedy_schedule

SMOKE = """
seed = 0
clients = 8
servers = 2

[dataset]
classes = 4
dim = 8
spread = 1.5
test_count = 400

[partition]
size = 100

[training]
local_steps = 5
aggregations = 5
horizon = 10
lr = 0.1

[degradation]
fraction = 0.25

[hsmm]
window = 20
fit_every = 5

[scheduler]
capacity = 3
"""


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# --- config -----------------------------------------------------------------

def test_defaults_follow_full_scale_setting():
    cfg = ExperimentConfig().validate()
    assert (cfg.clients, cfg.servers) == (50, 5)
    assert (cfg.training.lr, cfg.training.momentum, cfg.training.batch) == (0.01, 0.05, 32)
    assert (cfg.training.local_steps, cfg.training.aggregations) == (100, 100)
    assert cfg.capacity == 20


def test_config_round_trip_through_json(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(SMOKE + 'threshold = "auto"\n')
    cfg = load_config(path)
    assert cfg.scheduler.threshold == "auto"
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    inf_cfg = cfg.replace(scheduler={"threshold": float("-inf")})
    assert from_dict(json.loads(json.dumps(inf_cfg.to_dict()))) == inf_cfg


def test_config_errors_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="training.lr"):
        from_dict({"training": {"lr": -1.0}})
    with pytest.raises(ConfigError, match="dataset.colour"):
        from_dict({"dataset": {"colour": 1}})
    with pytest.raises(ConfigError, match="degradation.noise_end"):
        from_dict({"degradation": {"noise_end": 1.5}})
    with pytest.raises(ConfigError, match="clients"):
        from_dict({"clients": "many"})
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_config(bad)


# --- simulate ---------------------------------------------------------------

def test_simulate_smoke_run(tmp_path):
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE)
    start = time.perf_counter()
    assert main(["--out", str(tmp_path / "a"), "simulate", str(cfg)]) == 0
    assert time.perf_counter() - start < 60
    for name in ("metrics.csv", "trust.csv", "summary.json"):
        assert (tmp_path / "a" / name).is_file()
    rows = read_rows(tmp_path / "a" / "metrics.csv")
    assert rows[0] == ["round", "test_acc", "train_loss", "B", "participants", "dropped"]
    assert len(rows) == 51
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert {"final_acc", "best_acc", "final_loss", "mean_B", "config"} <= set(summary)
    assert from_dict(summary["config"]) == load_config(cfg, out=str(tmp_path / "a"))

    assert main(["simulate", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "trust.csv", "summary.json", "models.json"):
        assert (tmp_path / "a" / name).read_bytes() != b""
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "trust.csv").read_bytes() == (tmp_path / "b" / "trust.csv").read_bytes()


def test_simulate_missing_dataset_path(tmp_path, capsys):
    cfg = tmp_path / "idx.toml"
    cfg.write_text('[dataset]\nkind = "idx"\nimages = "missing-images.idx"\nlabels = "missing-labels.idx"\n')
    assert main(["simulate", str(cfg), "--out", str(tmp_path)]) == 2
    assert "dataset.images" in capsys.readouterr().err


def test_simulate_runtime_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "diverge.toml"
    cfg.write_text(SMOKE.replace("lr = 0.1", "lr = 1e300").replace("spread = 1.5", "spread = 1e200"))
    with np.errstate(all="ignore"):
        assert main(["simulate", str(cfg), "--out", str(tmp_path / "x")]) == 3
    assert "client" in capsys.readouterr().err


# --- schedule ---------------------------------------------------------------

def write_trust(path, trust):
    with open(path, "w") as fh:
        fh.write("client,server,TL\n")
        for i, row in enumerate(trust):
            for s, tl in enumerate(row):
                fh.write(f"{i},{s},{float(tl)!r}\n")


def write_sizes(path, sizes):
    with open(path, "w") as fh:
        fh.write("client,n\n" + "".join(f"{i},{n}\n" for i, n in enumerate(sizes)))


def test_schedule_hand_trace_matches_library(tmp_path):
    write_trust(tmp_path / "t.csv", [[5.0], [9.0]])
    write_sizes(tmp_path / "n.csv", [1, 1])
    rc = main(["schedule", str(tmp_path / "t.csv"), "--sizes", str(tmp_path / "n.csv"),
               "--threshold", "1", "--capacity", "1", "--out", str(tmp_path)])
    assert rc == 0
    assert read_rows(tmp_path / "assignment.csv") == [["client", "server"], ["1", "0"]]
    lib = greedy_schedule(SchedulingInstance([1, 1], [[5.0], [9.0]], 1.0, 1))
    assert np.argwhere(lib).tolist() == [[1, 0]]
    summary = json.loads((tmp_path / "schedule.json").read_text())
    assert summary["feasible"] and summary["solver"] == "trail"


def test_schedule_all_below_threshold(tmp_path):
    write_trust(tmp_path / "t.csv", [[1.0, 2.0], [0.5, 0.1]])
    write_sizes(tmp_path / "n.csv", [3, 4])
    assert main(["schedule", str(tmp_path / "t.csv"), "--sizes", str(tmp_path / "n.csv"),
                 "--threshold", "10", "--out", str(tmp_path)]) == 0
    assert read_rows(tmp_path / "assignment.csv") == [["client", "server"]]
    assert json.loads((tmp_path / "schedule.json").read_text())["B"] == 0.0


def test_schedule_exhaustive_has_zero_gap(tmp_path):
    rng = np.random.default_rng(0)
    write_trust(tmp_path / "t.csv", rng.uniform(0, 10, (6, 2)))
    write_sizes(tmp_path / "n.csv", rng.integers(1, 50, 6))
    assert main(["schedule", str(tmp_path / "t.csv"), "--sizes", str(tmp_path / "n.csv"), "--threshold", "3",
                 "--capacity", "2", "--solver", "exhaustive", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "schedule.json").read_text())["gap_to_oracle"] == 0.0


def test_schedule_malformed_csv_names_line(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("client,server,TL\n0,0,1.0\n1,0,abc\n")
    write_sizes(tmp_path / "n.csv", [1, 1])
    assert main(["schedule", str(tmp_path / "t.csv"), "--sizes", str(tmp_path / "n.csv")]) == 2
    assert "line 3" in capsys.readouterr().err


# --- hsmm-fit ---------------------------------------------------------------

def write_observations(path, z, sequence_ids=None):
    with open(path, "w") as fh:
        cols = [f"ch{s}" for s in range(z.shape[1])]
        fh.write(",".join((["sequence"] if sequence_ids is not None else []) + cols) + "\n")
        for k, row in enumerate(z):
            prefix = [str(sequence_ids[k])] if sequence_ids is not None else []
            fh.write(",".join(prefix + [repr(float(v)) for v in row]) + "\n")


def test_hsmm_fit_generated_data(tmp_path):
    rng = np.random.default_rng(1)
    z, _ = default_model(num_channels=2, max_duration=6).sample(150, rng)
    write_observations(tmp_path / "obs.csv", z, sequence_ids=np.repeat([0, 1, 2], 50))
    out = tmp_path / "fit"
    assert main(["hsmm-fit", str(tmp_path / "obs.csv"), "--states", "3", "--max-duration", "6",
                 "--max-iters", "30", "--out", str(out)]) == 0
    rows = read_rows(out / "trace.csv")
    assert rows[0] == ["iter", "loglik"]
    trace = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(np.diff(trace) >= -1e-9)
    model = QualityHsmm.load(out / "model.json")
    assert model.num_channels == 2

    # re-fitting the converged model moves by less than the tolerance in one iteration
    assert main(["hsmm-fit", str(tmp_path / "obs.csv"), "--init", str(out / "model.json"),
                 "--max-iters", "2000", "--tol", "1e-9", "--out", str(tmp_path / "conv")]) == 0
    assert main(["hsmm-fit", str(tmp_path / "obs.csv"), "--init", str(tmp_path / "conv" / "model.json"),
                 "--max-iters", "50", "--tol", "1e-6", "--out", str(tmp_path / "refit")]) == 0
    assert len(read_rows(tmp_path / "refit" / "trace.csv")) - 2 <= 1


def test_hsmm_fit_single_row(tmp_path):
    (tmp_path / "obs.csv").write_text("acc,delivery\n0.9,1.0\n")
    assert main(["hsmm-fit", str(tmp_path / "obs.csv"), "--max-duration", "3", "--out", str(tmp_path)]) == 0
    assert QualityHsmm.load(tmp_path / "model.json").max_duration == 3


def test_hsmm_fit_malformed_csv(tmp_path, capsys):
    (tmp_path / "obs.csv").write_text("acc,delivery\n0.9,1.0\n0.8\n")
    assert main(["hsmm-fit", str(tmp_path / "obs.csv"), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err


# --- report -----------------------------------------------------------------

def fake_run(root, name, seed, solver, fraction, acc, loss, **extra):
    cfg = ExperimentConfig().replace(seed=seed, scheduler={"solver": solver}, degradation={"fraction": fraction},
                                     **extra).to_dict()
    d = root / name
    d.mkdir(parents=True)
    (d / "summary.json").write_text(json.dumps({"final_acc": acc, "final_loss": loss, "config": cfg}))


def test_report_single_run(tmp_path):
    fake_run(tmp_path, "r0", 0, "trail", 0.3, 0.8, 0.5)
    assert main(["report", str(tmp_path / "r0"), "--out", str(tmp_path / "rep")]) == 0
    rows = read_rows(tmp_path / "rep" / "report.csv")
    assert len(rows) == 2 and rows[1][:3] == ["0.3", "trail", "1"]


def test_report_identical_runs_have_zero_spread(tmp_path):
    fake_run(tmp_path, "a", 0, "trail", 0.3, 0.8, 0.5)
    fake_run(tmp_path, "b", 1, "trail", 0.3, 0.8, 0.5)
    fake_run(tmp_path, "c", 0, "random", 0.3, 0.7, 0.6)
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0
    rows = {r[1]: r for r in read_rows(tmp_path / "rep" / "report.csv")[1:]}
    assert float(rows["trail"][4]) == 0.0 and rows["trail"][7] == "*" and rows["random"][7] == ""
    assert len(read_rows(tmp_path / "rep" / "runs.csv")) == 4


def test_report_warns_on_mixed_configs(tmp_path, capsys):
    fake_run(tmp_path, "a", 0, "trail", 0.3, 0.8, 0.5)
    fake_run(tmp_path, "b", 0, "trail", 0.3, 0.8, 0.5, clients=10)
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0
    assert "warning" in capsys.readouterr().err
