import json
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from test_experiment import small_config

from fedrad import experiment as exp
from fedrad.cli import main
from fedrad.validation import corrupt_grid_file


@pytest.fixture
def config_file(tmp_path):
    config = small_config(tmp_path, n_sites=2, rounds=2,
                          scenarios=("personalization", "generalization_with_local"))
    path = tmp_path / "exp.json"
    exp.save_config(config, path)
    return path, config


def test_gen_validate_characterize(config_file, capsys):
    path, config = config_file
    assert main(["gen", "--config", str(path)]) == 0
    out = Path(config.output_dir)
    assert (out / "sites" / "s0" / "manifest.json").exists()
    assert (out / "experiment.json").exists()

    assert main(["validate", "--config", str(path)]) == 0
    assert main(["characterize", "--config", str(path)]) == 0
    doc = json.loads((out / "characteristics.json").read_text())
    assert doc["experiment"] == config.digest
    assert len(doc["sites"]) == 2
    capsys.readouterr()


def test_validate_detects_corruption(config_file, tmp_path, capsys):
    path, config = config_file
    main(["gen", "--config", str(path)])
    site_dir = Path(config.output_dir) / "sites" / "s0"
    victim = json.loads((site_dir / "manifest.json").read_text())["samples"][0]["sample_id"]
    corrupt_grid_file(site_dir, victim, seed=3)
    report_path = tmp_path / "report.json"
    code = main(["validate", str(site_dir), "--json", str(report_path)])
    assert code == 2
    report = json.loads(report_path.read_text())
    assert report[0]["n_failed"] == 1
    assert report[0]["counts_by_code"] == {"HeaderCorrupt": 1}
    capsys.readouterr()


def test_full_sim_pipeline(config_file, capsys):
    path, config = config_file
    out = Path(config.output_dir)
    assert main(["gen", "--config", str(path)]) == 0
    assert main(["validate", "--config", str(path)]) == 0
    assert main(["train-sim", "--config", str(path)]) == 0
    assert (out / "models" / "models.json").exists()
    assert (out / "timing.csv").exists()

    assert main(["evaluate", "--config", str(path)]) == 0
    for scenario in config.scenarios:
        metrics = out / "eval" / scenario / "metrics.csv"
        assert metrics.exists()
        assert main(["rank", "--in", str(metrics), "--scenario", scenario]) == 0
        assert (metrics.parent / "ranks.csv").exists()
        summary = json.loads((metrics.parent / "summary.json").read_text())
        assert summary["experiment"] == config.digest
        assert summary["best_to_worst"]

    # re-running the evaluation stages reproduces byte-identical artifacts
    snapshots = {f: f.read_bytes() for scenario in config.scenarios
                 for f in (out / "eval" / scenario).iterdir()}
    assert main(["evaluate", "--config", str(path)]) == 0
    for scenario in config.scenarios:
        metrics = out / "eval" / scenario / "metrics.csv"
        assert main(["rank", "--in", str(metrics), "--scenario", scenario]) == 0
    for f, data in snapshots.items():
        assert f.read_bytes() == data, f"{f} changed between identical runs"

    assert main(["report", "--config", str(path)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["experiment"] == config.digest
    assert set(report["scenarios"]) == set(config.scenarios)
    capsys.readouterr()


def test_train_sim_rerun_byte_identical(config_file, capsys):
    path, config = config_file
    out = Path(config.output_dir)
    main(["gen", "--config", str(path)])
    assert main(["train-sim", "--config", str(path)]) == 0
    first = {f.name: f.read_bytes() for f in (out / "models").iterdir()}
    timing1 = (out / "timing.csv").read_bytes()
    assert main(["train-sim", "--config", str(path)]) == 0
    second = {f.name: f.read_bytes() for f in (out / "models").iterdir()}
    assert first == second
    assert (out / "timing.csv").read_bytes() == timing1
    capsys.readouterr()


def test_report_refuses_foreign_artifacts(config_file, capsys):
    path, config = config_file
    out = Path(config.output_dir)
    main(["gen", "--config", str(path)])
    main(["train-sim", "--config", str(path)])
    main(["evaluate", "--config", str(path)])
    for scenario in config.scenarios:
        metrics = out / "eval" / scenario / "metrics.csv"
        main(["rank", "--in", str(metrics), "--scenario", scenario])
    # tamper with one summary's digest
    summary_path = out / "eval" / config.scenarios[0] / "summary.json"
    doc = json.loads(summary_path.read_text())
    doc["experiment"] = "f" * 64
    summary_path.write_text(json.dumps(doc))
    assert main(["report", "--config", str(path)]) == 1
    capsys.readouterr()


def test_tcp_serve_join_roundtrip(tmp_path, capsys):
    config = small_config(tmp_path, n_sites=1, rounds=2)
    from dataclasses import replace
    config = replace(config, transport="tcp")
    path = tmp_path / "exp.json"
    exp.save_config(config, path)
    main(["gen", "--config", str(path)])

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]

    server_rc = {}
    server = threading.Thread(
        target=lambda: server_rc.update(rc=main(["serve", "--config", str(path),
                                                 "--bind", f"127.0.0.1:{port}"])),
        daemon=True)
    server.start()

    site_dir = Path(config.output_dir) / "sites" / "s0"
    deadline = time.monotonic() + 15
    rc = 1
    while rc == 1 and time.monotonic() < deadline:
        rc = main(["join", "--site", str(site_dir),
                   "--server", f"127.0.0.1:{port}", "--config", str(path)])
        if rc == 1:
            time.sleep(0.1)
    assert rc == 0
    server.join(timeout=30)
    assert not server.is_alive()
    assert server_rc["rc"] == 0
    assert (site_dir / "final_model.frwt").exists()
    # the server also stored the fed model in the registry
    registry = exp.load_registry(Path(config.output_dir), config.digest)
    from fedrad.learner import load_weights
    assert np.array_equal(load_weights(site_dir / "final_model.frwt"),
                          registry.fed.weights)
    capsys.readouterr()


def test_usage_errors(tmp_path, capsys):
    assert main(["gen", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["validate"]) == 1
    capsys.readouterr()


def test_console_entry_point():
    result = subprocess.run([sys.executable, "-m", "fedrad.cli", "--help"],
                            capture_output=True, text=True, timeout=60)
    assert result.returncode == 0
    assert "fedrad" in result.stdout
