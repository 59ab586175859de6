import json
import math

import safe_sim


def tiny_config(**overrides):
    cfg = json.loads(safe_sim.default_config())
    cfg.update(
        {
            "clients": 2,
            "clients_per_round": 2,
            "rounds": 1,
            "local_epochs": 1,
            "batch_size": 8,
            "seed": 3,
        }
    )
    cfg["data"].update({"classes": 4, "samples_per_class": 10, "ses_per_class": 2})
    cfg.update(overrides)
    return cfg


def test_default_config_round_trips():
    cfg = json.loads(safe_sim.default_config())
    assert cfg["clients"] == 5
    assert cfg["rounds"] == 40
    assert set(cfg["toggles"]) == {"cro", "fau", "dmr", "ace"}


def test_run_training_reports_every_round():
    report = json.loads(safe_sim.run_training(json.dumps(tiny_config())))
    assert len(report["rounds"]) == 2
    for row in report["rounds"]:
        assert 0.0 <= row["cloud_c_acc"] <= 1.0
        assert len(row["cr_tilde"]) == 4
    assert len(report["cloud_confusion"]) == 4


def test_run_training_is_deterministic():
    cfg = json.dumps(tiny_config())
    assert safe_sim.run_training_csv(cfg) == safe_sim.run_training_csv(cfg)


def test_csv_header_names_every_client():
    csv = safe_sim.run_training_csv(json.dumps(tiny_config()))
    header = csv.splitlines()[0].split(",")
    assert header[:4] == ["round", "eps_plus", "eps_minus", "tau"]
    assert header[-2:] == ["d_cka_0", "d_cka_1"]


def test_partition_preview_conserves_samples():
    pv = json.loads(safe_sim.partition_preview(json.dumps(tiny_config())))
    totals = [sum(col) for col in zip(*pv["counts"])]
    assert totals == pv["totals_per_class"]
    assert pv["achieved_ratio"] >= 1.0


def test_linear_cka_basic_properties():
    a = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]]
    assert abs(safe_sim.linear_cka(a, a) - 1.0) < 1e-9
    b = [[row[1], row[0]] for row in a]
    v = safe_sim.linear_cka(a, b)
    assert 0.0 <= v <= 1.0


def test_schedules():
    assert safe_sim.eps_plus(0, 40) == 0.0
    assert abs(safe_sim.eps_minus(20, 40) - math.sqrt(2) / 2) < 1e-12
    assert abs(safe_sim.anneal_tau(0, 40) - 1.0) < 1e-12
    assert abs(safe_sim.anneal_tau(40, 40) - 0.1) < 1e-12


def test_invalid_config_raises():
    cfg = tiny_config()
    cfg["clients_per_round"] = 99
    try:
        safe_sim.run_training(json.dumps(cfg))
    except RuntimeError as e:
        assert "clients_per_round" in str(e)
    else:
        raise AssertionError("expected a config error")
