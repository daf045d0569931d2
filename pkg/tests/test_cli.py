import json
import os
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from adnsim import svg
from adnsim.cli import EXIT_ANALYSIS, EXIT_OK, EXIT_USAGE, OUTPUT_ENV, main
from adnsim.dynamics import read_csv_rows

NS = {"s": svg.SVG_NS}


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def _config_line(path: Path) -> dict:
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first.startswith("# config: ")
    return json.loads(first[len("# config: "):])


# -- powerflow / validate ---------------------------------------------------------


def test_powerflow_bundled(tmp_path, capsys):
    assert run(tmp_path, "powerflow", "cigre12.json") == EXIT_OK
    out = capsys.readouterr().out
    assert "P_meas = 24.37" in out
    rows = read_csv_rows(tmp_path / "powerflow_buses.csv")
    assert len(rows) == 12 and rows[0]["bus_id"] == "HV-00"
    assert set(rows[0]) == {"bus_id", "v_mag_pu", "v_angle_deg", "p_inj_mw", "q_inj_mvar"}
    assert _config_line(tmp_path / "powerflow_buses.csv")["subcommand"] == "powerflow"


def test_powerflow_impedance_loads(tmp_path, capsys):
    assert run(tmp_path, "powerflow", "--load-model", "z") == EXIT_OK
    assert "P_meas = 25.08" in capsys.readouterr().out
    assert _config_line(tmp_path / "powerflow_buses.csv")["load_model"] == "z"


def test_missing_file_names_path(tmp_path, capsys):
    assert run(tmp_path, "powerflow", str(tmp_path / "absent.json")) == EXIT_USAGE
    assert "absent.json" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "survive-node")  # --bus missing
    assert exc.value.code == EXIT_USAGE
    assert run(tmp_path, "survive-node", "--bus", "MV-99", "--samples", "1") == EXIT_USAGE


def test_powerflow_non_convergence_exit_1(tmp_path, grid_doc):
    doc = json.loads(json.dumps(grid_doc))
    for ld in doc["loads"]:
        ld["p_mw"] *= 40
    path = tmp_path / "heavy.json"
    path.write_text(json.dumps(doc))
    assert run(tmp_path, "powerflow", str(path)) == EXIT_ANALYSIS


def test_validate_self_and_perturbed(tmp_path, capsys):
    assert run(tmp_path, "powerflow") == EXIT_OK
    ref = tmp_path / "powerflow_buses.csv"
    assert run(tmp_path, "validate", str(ref)) == EXIT_OK
    rows = read_csv_rows(tmp_path / "validation.csv")
    assert all(float(r["dev_mag_pu"]) == 0 and float(r["dev_angle_deg"]) == 0 for r in rows)

    lines = ref.read_text().splitlines()
    data = [ln for ln in lines if not ln.startswith("#")]
    hdr, body = data[0], data[1:]
    cells = body[5].split(",")
    cells[2] = repr(float(cells[2]) + 0.01)
    body[5] = ",".join(cells)
    bad = tmp_path / "perturbed.csv"
    bad.write_text("\n".join([hdr, *body]) + "\n")
    assert run(tmp_path, "validate", str(bad)) == EXIT_ANALYSIS
    rows = read_csv_rows(tmp_path / "validation.csv")
    failed = [r["bus_id"] for r in rows if r["pass"] == "0"]
    assert failed == [cells[0]]


def test_validate_bus_mismatch(tmp_path, capsys):
    ref = tmp_path / "ref.csv"
    ref.write_text("bus_id,v_mag_pu,v_angle_deg\nHV-00,1.0,0.0\n")
    assert run(tmp_path, "validate", str(ref)) == EXIT_USAGE
    assert "bus sets differ" in capsys.readouterr().err


# -- simulate ------------------------------------------------------------------------


def test_simulate_bundled_with_plot(tmp_path):
    assert run(tmp_path, "simulate", "--plot") == EXIT_OK
    rows = read_csv_rows(tmp_path / "trajectory.csv")
    t = np.array([float(r["time_s"]) for r in rows])
    v8 = np.array([float(r["v_mag_MV-08"]) for r in rows])
    assert t[0] == 0.0 and t[-1] == pytest.approx(6.0)
    window = (t > 3.0) & (t < 3.15)
    assert v8[window].max() < 0.9 < v8[t < 3.0].min()
    summary = json.loads((tmp_path / "simulate_summary.json").read_text())
    assert summary["faults"][0]["verdict"] == "survived"

    root = ET.parse(tmp_path / "voltages.svg").getroot()
    meta = root.find("s:metadata", NS)
    assert json.loads(meta.text)["subcommand"] == "simulate"
    lines = {p.get("data-series"): p for p in root.iterfind(".//s:polyline", NS)}
    assert set(lines) == {f"MV-{i:02d}" for i in range(1, 12)}
    assert float(lines["MV-08"].get("data-min")) == pytest.approx(v8.min(), abs=1e-8)


def test_simulate_without_events_is_flat(tmp_path):
    scen = tmp_path / "calm.json"
    scen.write_text(json.dumps({"load_model": "pq", "t_end": 2.0}))
    assert run(tmp_path, "simulate", str(scen)) == EXIT_OK
    rows = read_csv_rows(tmp_path / "trajectory.csv")
    v = np.array([[float(r[f"v_mag_MV-{i:02d}"]) for i in range(1, 12)] for r in rows])
    assert np.ptp(v, axis=0).max() < 1e-9


# -- Monte Carlo commands --------------------------------------------------------------


def test_survive_node_summary(tmp_path):
    assert run(tmp_path, "survive-node", "--bus", "MV-03", "--samples", "6", "--seed", "7",
               "--workers", "1") == EXIT_OK
    doc = json.loads((tmp_path / "survive_node_MV-03_pq.json").read_text())
    assert doc["N"] == 6 and doc["ci"] == 1 / (2 * np.sqrt(6))
    assert doc["config"]["seed"] == 7 and doc["config"]["bus"] == "MV-03"
    trials = read_csv_rows(tmp_path / "survive_node_MV-03_pq_trials.csv")
    assert len(trials) == 6 and sum(int(r["survived"]) for r in trials) == doc["survivors"]


def test_rigged_curve_all_survive(tmp_path):
    curve = tmp_path / "zero.json"
    curve.write_text(json.dumps([{"tau_s": 0.0, "v_min_pu": 0.0}, {"tau_s": 1.0, "v_min_pu": 0.0}]))
    assert run(tmp_path, "survive-node", "--bus", "MV-05", "--samples", "4", "--curve", str(curve),
               "--load-model", "z") == EXIT_OK
    assert json.loads((tmp_path / "survive_node_MV-05_z.json").read_text())["mu"] == 1.0


def test_reruns_identical_across_workers(tmp_path):
    outs = []
    for k, workers in enumerate(("1", "4")):
        d = tmp_path / f"run{k}"
        assert main(["survive-node", "--bus", "MV-08", "--samples", "5", "--seed", "3", "--workers", workers,
                     "--out", str(d)]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]


def test_survive_all_outputs(tmp_path):
    assert run(tmp_path, "survive-all", "--samples", "2", "--buses", "MV-01", "MV-03", "--workers", "1") == EXIT_OK
    rows = read_csv_rows(tmp_path / "survive_all.csv")
    assert {(r["bus"], r["load_model"]) for r in rows} == {(b, m) for b in ("MV-01", "MV-03") for m in ("pq", "z")}
    root = ET.parse(tmp_path / "survive_all.svg").getroot()
    bars = {(r.get("data-label"), r.get("data-group")): float(r.get("data-value"))
            for r in root.iterfind(".//s:rect", NS) if r.get("data-value") is not None}
    for r in rows:
        assert bars[(r["bus"], r["load_model"])] == float(r["mu"])


def test_envelope_degenerate_box(tmp_path):
    args = ["--samples", "6", "--seed", "3", "--workers", "1"]
    assert run(tmp_path, "survive-envelope", "--p-range", "0", "--q-range", "0", "--min-count", "1", *args) == EXIT_OK
    assert run(tmp_path, "survive-node", "--bus", "MV-03", "--t-on", "1.25", *args) == EXIT_OK
    node = json.loads((tmp_path / "survive_node_MV-03_pq.json").read_text())
    cells = [r for r in read_csv_rows(tmp_path / "envelope_MV-03_pq.csv") if int(r["count"])]
    assert cells and all(int(c["count"]) == 6 for c in cells)
    assert {float(c["mu"]) for c in cells} == {node["mu"]}

    root = ET.parse(tmp_path / "envelope_MV-03_pq.svg").getroot()
    rects = [r for r in root.iterfind(".//s:rect", NS) if r.get("data-mu") is not None]
    assert len(rects) == len(read_csv_rows(tmp_path / "envelope_MV-03_pq.csv"))


def test_envelope_marks_insufficient(tmp_path):
    assert run(tmp_path, "survive-envelope", "--samples", "4", "--p-range", "1", "--q-range", "1",
               "--workers", "1") == EXIT_OK
    rows = read_csv_rows(tmp_path / "envelope_MV-03_pq.csv")
    assert rows and all(r["mu"] == "insufficient" for r in rows)
    assert _config_line(tmp_path / "envelope_MV-03_pq.csv")["min_count"] == 100


def test_output_dir_from_environment(tmp_path):
    env_dir = tmp_path / "from_env"
    proc = subprocess.run([sys.executable, "-m", "adnsim.cli", "powerflow"], capture_output=True, text=True,
                          env={**os.environ, OUTPUT_ENV: str(env_dir)}, cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert (env_dir / "powerflow_buses.csv").exists()
    with open(env_dir / "powerflow_buses.csv", newline="") as fh:
        assert sum(1 for ln in fh if not ln.startswith("#")) == 13


def test_survive_all_defaults_to_every_mv_bus(tmp_path):
    assert run(tmp_path, "survive-all", "--samples", "1", "--load-model", "z", "--workers", "1") == EXIT_OK
    rows = read_csv_rows(tmp_path / "survive_all.csv")
    assert [r["bus"] for r in rows] == [f"MV-{i:02d}" for i in range(1, 12)]
