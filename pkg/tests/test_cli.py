import json
import subprocess
import sys

from elastic_bcm.cli import OUTPUT_ENV, run
from elastic_bcm.config import fixture_path

FIXTURE = str(fixture_path())
SMALL = ["--set", "grid.n=10", "--set", "basis.atoms=3", "--set", "time.T=1"]


def read_dir(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "run.log"}


def test_verify_passes_on_fixture(tmp_path, capsys):
    code = run(["verify", FIXTURE, "--output-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0, out
    assert "FAIL" not in out
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["all_pass"]
    assert len(report["checks"]) == 6 and all(c["pass"] for c in report["checks"])


def test_missing_required_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[grid]\nd = 2\nn = 8\n")
    assert run(["forward", str(cfg), "--output-dir", str(tmp_path / "o")]) == 2
    assert "grid.x0: required key missing" in capsys.readouterr().err


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[grid]\nd = 2\nn = 8\nx0 = -1,-1\nsize = 3\n")
    assert run(["forward", str(cfg), "--output-dir", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "grid.size" in err and "line 5" in err


def test_gamma_beyond_grid_resolution(tmp_path, capsys):
    code = run(["reconstruct", FIXTURE, *SMALL, "--set", "probe.gamma=1000", "--output-dir", str(tmp_path)])
    assert code == 2
    assert "max representable |xi|" in capsys.readouterr().err


def test_reruns_are_byte_identical_and_csv_has_sidecar(tmp_path):
    args = ["probe", FIXTURE, *SMALL]
    assert run(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert run(args + ["--output-dir", str(tmp_path / "b")]) == 0
    a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
    assert a == b
    meta = json.loads(a["probes.csv.json"])
    assert meta["command"] == "probe"
    assert meta["columns"] == a["probes.csv"].decode().splitlines()[0].split(",")
    assert len(meta["config_digest"]) == 64


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert run(["carleman-check", FIXTURE, "--set", "grid.n=8"]) == 0
    data = json.loads((tmp_path / "env" / "carleman.json").read_text())
    assert data["gamma_faces"] == [1, 3]
    assert data["Tmin"] > 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "elastic_bcm", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
    res = subprocess.run([sys.executable, "-m", "elastic_bcm", "nonsense", FIXTURE], capture_output=True, text=True)
    assert res.returncode == 2
