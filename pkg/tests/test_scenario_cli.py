import os

import pytest
import yaml

from snowsim.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from snowsim.scenario import (
    ScenarioConfig,
    ScenarioError,
    dump_config,
    load_config,
    loads_config,
    preset,
)
from snowsim.sop import instance_from_dict


# ----------------------------------------------------------- config I/O

def test_minimal_config_fully_defaulted():
    cfg = loads_config("""
nodes:
  - id: 0
    position: [120.0, 0.0]
""")
    assert cfg.band_start_hz == 547_000_000
    assert cfg.plan().n == 29
    assert cfg.phy.modulation == "bpsk"
    assert cfg.phy.spreading_factor == 8
    assert cfg.nodes[0].traffic.payload_bytes == 28
    assert cfg.mac.initial_window == 32


def test_roundtrip_load_dump_load():
    cfg = preset("ch4-detroit")
    text = dump_config(cfg)
    clone = loads_config(text)
    assert clone == cfg
    assert dump_config(clone) == text


def test_ch3_preset_has_29_subcarriers():
    cfg = preset("ch3-defaults")
    assert cfg.plan().n == 29
    assert cfg.subcarrier_width_hz == 400_000
    assert cfg.overlap == 0.5


def test_detroit_preset_layout():
    cfg = preset("ch4-detroit")
    assert len(cfg.nodes) == 25
    assert cfg.mac.join_subcarrier == 28
    assert cfg.mac.downlink_subcarrier == 26
    assert cfg.plan().n == 29


def test_tree_presets_carry_instances():
    for name, n in (("ch5-tree3", 3), ("ch5-tree15", 15)):
        cfg = preset(name)
        inst = instance_from_dict(cfg.sop)
        assert inst.n_bs == n
        # every tree link shares at least one available subcarrier
        for child, parent in inst.tree_pairs():
            assert inst.availability[child] & inst.availability[parent]


def test_overlap_07_rejected():
    with pytest.raises(ScenarioError):
        loads_config("overlap: 0.7")


def test_unknown_field_rejected_with_path():
    with pytest.raises(ScenarioError, match="phy.bogus"):
        loads_config("phy: {bogus: 1}")


def test_unusable_downlink_rejected():
    with pytest.raises(ScenarioError, match="downlink"):
        loads_config("""
occupied: [[549000000, 550000000]]
mac: {downlink_subcarrier: 10}
""")


# ----------------------------------------------------------- CLI

def write_worked_instance(path):
    doc = {
        "bs": [
            {"id": 0, "parent": None, "availability": list(range(1, 11)),
             "sigma": 3},
            {"id": 1, "parent": 0, "availability": list(range(1, 11)),
             "sigma": 3},
        ],
        "explicit_interferers": [[0, 1]],
        "phi_overrides": [[0, 1, 4]],
    }
    path.write_text(yaml.safe_dump(doc))


def test_cli_sop_solve_greedy_worked_instance(tmp_path, capsys):
    inst = tmp_path / "inst.yaml"
    write_worked_instance(inst)
    rc = main(["sop-solve", "--algo", "greedy", "--instance", str(inst),
               "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert "objective=14" in out
    assert "feasible=True" in out
    result = yaml.safe_load((tmp_path / "sop_result.yaml").read_text())
    assert result["objective"] == 14
    assert result["feasible"] is True


def test_cli_sop_solve_infeasible_exit_code(tmp_path):
    doc = {
        "bs": [
            {"id": 0, "parent": None, "availability": [1, 2], "sigma": 2},
            {"id": 1, "parent": 0, "availability": [1, 2], "sigma": 2},
        ],
        "explicit_interferers": [[0, 1]],
        "phi_overrides": [[0, 1, 0]],
    }
    inst = tmp_path / "bad.yaml"
    inst.write_text(yaml.safe_dump(doc))
    rc = main(["sop-solve", "--algo", "greedy", "--instance", str(inst),
               "--out", str(tmp_path)])
    assert rc == EXIT_INFEASIBLE


def test_cli_sop_sweep_stats(tmp_path, capsys):
    inst = tmp_path / "inst.yaml"
    write_worked_instance(inst)
    rc = main(["sop-sweep", "--instance", str(inst), "--seeds", "500",
               "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert "ratio_vs_sumZ" in out


def test_cli_sop_solve_tree_preset_links(tmp_path, capsys):
    rc = main(["sop-solve", "--algo", "greedy", "--preset", "ch5-tree3",
               "--links", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert out.count("link BS") == 2


def test_cli_simulate_preset_with_node_override(tmp_path, capsys):
    rc = main(["simulate", "--preset", "ch3-defaults", "--nodes", "3",
               "--seed", "5", "--out", str(tmp_path), "--trace"])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert "prr=1.0000" in out
    assert (tmp_path / "metrics.yaml").exists()
    assert (tmp_path / "trace.csv").read_text().startswith(
        "tick,node,event,subcarrier")
    metrics = yaml.safe_load((tmp_path / "metrics.yaml").read_text())
    assert len(metrics["per_node"]) == 3


def test_cli_simulate_config_file(tmp_path, capsys):
    cfg = ScenarioConfig()
    from snowsim.scenario import NodeSpec, TrafficSpec
    cfg.nodes = [NodeSpec(0, traffic=TrafficSpec(count=3))]
    cfg.run.horizon_ticks = 200_000
    path = tmp_path / "scenario.yaml"
    path.write_text(dump_config(cfg))
    rc = main(["simulate", "--config", str(path), "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert "delivered=3" in capsys.readouterr().out


def test_cli_bad_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("overlap: 0.9\n")
    rc = main(["simulate", "--config", str(path), "--out", str(tmp_path)])
    assert rc == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_cli_phy_bench(tmp_path, capsys):
    rc = main(["phy-bench", "--transmitters", "8", "--payload", "6",
               "--seed", "3", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert "decoded=8/8" in out


def test_cli_calibrate_writes_table(tmp_path, capsys):
    rc = main(["calibrate", "--snr-grid=-12:0:6", "--chips", "400",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    doc = yaml.safe_load((tmp_path / "calibration.yaml").read_text())
    assert set(doc["table"]) == {-12.0, -6.0, 0.0}


def test_cli_out_dir_from_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SNOWSIM_OUT", str(tmp_path / "envout"))
    rc = main(["calibrate", "--snr-grid", "0:0:1", "--chips", "100"])
    assert rc == EXIT_OK
    assert (tmp_path / "envout" / "calibration.yaml").exists()
