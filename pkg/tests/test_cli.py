import csv
import json
import socket

import pytest

from slicedrl.cli import main
from slicedrl.config import RunConfig, load_config
from slicedrl.core import QuantizerConfig
from slicedrl.policy import TrainedPolicy
from slicedrl.xapps import KpmStore, read_delay_table

TINY = {
    "quantizer": {"step_s": 10.0, "min_L": 50.0, "max_H": 60.0},
    "actions": {"weights_pct": [20, 40, 60]},
    "dqn": {"hidden_size": 16, "n_hidden": 2, "batch": 16, "max_steps": 10, "episodes": 5},
    "traffic": {"eval_rates_mbps": [30.0, 130.0], "eval_duration_s": 0.5, "dataset_window_s": 0.5},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _comment(path):
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ")
    return json.loads(first[2:])


def test_config_toml_and_json(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('seed = 4\n[quantizer]\nstep_s = 10.0\nmin_L = 50.0\nmax_H = 60.0\n'
                    '[actions]\nweights_pct = [20, 40]\n')
    cfg = load_config(toml)
    assert cfg.seed == 4 and cfg.quantizer == QuantizerConfig(10, 50, 60)
    assert cfg.actions.weights_pct == (20, 40)
    js = tmp_path / "c.json"
    js.write_text(json.dumps(cfg.to_dict()))
    assert load_config(js) == cfg and load_config(js).digest() == cfg.digest()
    assert cfg.digest() != RunConfig().digest()
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": {}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"dqn": {"bogus": 1}})
    assert RunConfig().replace(dqn__episodes=3, seed=None).dqn.episodes == 3


def test_pipeline_end_to_end(tmp_path, tiny_config):
    out = tmp_path / "run"
    base = ["--config", tiny_config, "--out", str(out), "--seed", "7", "--workers", "1"]
    assert main(base + ["dataset"]) == 0
    store = KpmStore(out / "kpm.jsonl")
    assert len(store) == 6 * 5
    meta = _comment(out / "delay_table.csv")
    cfg_hash = meta["config_hash"]
    assert meta["seed"] == 7
    assert all(m["config_hash"] == cfg_hash and m["seed"] == 7 for m, _ in store.records())
    assert len(read_delay_table(out / "delay_table.csv")) == 6

    assert main(base + ["train"]) == 0
    pol = TrainedPolicy.load(out / "policy.csv")
    assert len(pol.table) == 2 and set(pol.table.values()) <= {20, 40, 60}
    assert pol.metadata["config_hash"] and pol.metadata["seed"] == 7
    assert len(_rows(out / "reward_trace.csv")) == 5
    assert (out / "reward.svg").read_text().startswith("<svg")

    assert main(base + ["eval"]) == 0
    rows = _rows(out / "results.csv")
    assert len(rows) == 2 * 2 * 2
    assert {r["scheduler"] for r in rows} == {"drl", "pf"}
    for name in ("loss", "latency", "departure"):
        assert "DRL-S1" in (out / f"{name}.svg").read_text()
    assert _comment(out / "results.csv")["seed"] == 7


def test_same_seed_same_artifacts(tmp_path, tiny_config):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        base = ["--config", tiny_config, "--out", str(out), "--seed", "7", "--workers", "1"]
        assert main(base + ["dataset"]) == 0
        assert main(base + ["train"]) == 0
        outs.append(out)
    for name in ("delay_table.csv", "policy.csv", "reward_trace.csv", "kpm.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_dataset_window_rows_per_cell(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"quantizer": {"min_L": 60.0, "max_H": 60.0}, "actions": {"weights_pct": [50]}}))
    out = tmp_path / "o"
    assert main(["--config", str(cfg), "--out", str(out), "dataset", "--window-s", "120"]) == 0
    assert len(KpmStore(out / "kpm.jsonl")) == 1200


def test_default_dataset_plan_arithmetic():
    from slicedrl.experiments import dataset_plan
    plan = dataset_plan(RunConfig())
    rows_per_cell = round(plan.window_s * 1000 / plan.kpm_period_ms)
    assert len(plan) * rows_per_cell == 71_400


def test_default_eval_has_52_rows(tmp_path):
    table_cfg = tmp_path / "c.json"
    table_cfg.write_text(json.dumps({"traffic": {"eval_duration_s": 0.1}}))
    TrainedPolicy({s: 50 for s in QuantizerConfig().grid()}).save(tmp_path / "policy.csv")
    assert main(["--config", str(table_cfg), "--out", str(tmp_path), "--workers", "1", "eval", "--no-svg"]) == 0
    assert len(_rows(tmp_path / "results.csv")) == 52


def test_serve_inprocess_cadence(tmp_path):
    TrainedPolicy({s: 30 for s in QuantizerConfig().grid()}).save(tmp_path / "policy.csv")
    assert main(["--out", str(tmp_path), "serve", "--duration-s", "10"]) == 0
    recs = KpmStore(tmp_path / "serve_kpm.jsonl").records()
    assert len(recs) == 100
    assert recs[0][1].active_weight_pct == 50 and recs[-1][1].active_weight_pct == 30


def test_serve_pf_tcp(tmp_path):
    assert main(["--out", str(tmp_path), "serve", "--scheduler", "pf", "--transport", "tcp",
                 "--port", "0", "--duration-s", "2"]) == 0
    recs = KpmStore(tmp_path / "serve_kpm.jsonl").records()
    assert len(recs) == 20
    assert all(r.active_weight_pct is None for _, r in recs)
    assert all(m["scheduler"] == "pf" for m, _ in recs)


def test_exit_codes(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "train"]) == 1  # no delay table
    assert main(["--out", str(tmp_path), "serve", "--scheduler", "fixed", "--weight", "37"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"quantizer": {"step_s": 7.0}}))
    assert main(["--config", str(bad), "--out", str(tmp_path), "train"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["nope"])
    assert exc.value.code == 1
    busy = socket.socket()
    busy.bind(("127.0.0.1", 0))
    busy.listen()
    try:
        port = str(busy.getsockname()[1])
        assert main(["--out", str(tmp_path), "serve", "--scheduler", "pf", "--transport", "tcp",
                     "--port", port, "--duration-s", "1"]) == 2
    finally:
        busy.close()


def test_incomplete_table_names_cell(tmp_path, capsys):
    (tmp_path / "delay_table.csv").write_text(
        "state_mbps,weight_pct,mean_delay_ms,mean_loss_pct,mean_served_mbps\n10,10,1.0,0,10\n")
    assert main(["--out", str(tmp_path), "train"]) == 1
    err = capsys.readouterr().err
    assert "state=10" in err and "weight=15" in err
