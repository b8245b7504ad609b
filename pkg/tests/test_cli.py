import json
import subprocess
import sys

import pytest

from forward_fbsde.cli import main
from forward_fbsde.cli import config as C


def run(tmp_path, *args):
    return main([*args, "--out-dir", str(tmp_path)])


def envelope(tmp_path, command):
    return json.loads((tmp_path / f"{command}.json").read_text())


def test_bundled_listing(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--list-scenarios"])
    assert e.value.code == 0
    names = capsys.readouterr().out.split()
    assert set(names) == set(C.bundled_names()) >= {"flat-theta-entropic", "theta-zero", "negative-control"}


def test_flat_report(tmp_path):
    assert run(tmp_path, "report", "--config", "flat-theta-entropic") == 0
    env = envelope(tmp_path, "report")
    assert env["passed"] and env["failures"] == []
    assert env["results"]["ergodic"]["lambda"] == pytest.approx(-0.02, abs=1e-10)
    for name in ["ergodic.csv", "primal_field.csv", "oce.json", "oce_axioms.csv"]:
        assert (tmp_path / name).exists()


def test_ergodic_only(tmp_path):
    assert run(tmp_path, "ergodic", "--config", "flat-theta-entropic") == 0
    assert envelope(tmp_path, "ergodic")["operations"] == ["ergodic"]


def test_tanh_oce(tmp_path):
    assert run(tmp_path, "oce", "--config", "tanh-factor-oce") == 0
    res = envelope(tmp_path, "oce")["results"]["oce"]
    assert res["dual_gap"] <= 5e-3
    assert all(r["passed"] is not False for r in res["axiom_results"].values())
    assert [c["passed"] for c in res["maturity_checks"]] == [True, True, True]


def test_theta_zero_verify(tmp_path):
    assert run(tmp_path, "report", "--config", "theta-zero") == 0
    env = envelope(tmp_path, "report")
    assert env["operations"] == ["ergodic", "primal", "dual", "oce", "verify"]


def test_negative_control_fails(tmp_path, capsys):
    assert run(tmp_path, "verify", "--config", "negative-control") == 4
    env = envelope(tmp_path, "verify")
    assert not env["passed"]
    assert env["error"]["category"] == "invariant"
    assert "statistic" in capsys.readouterr().err


def test_decoupling_case2(tmp_path):
    assert run(tmp_path, "verify", "--config", "decoupling-case2") == 0
    res = envelope(tmp_path, "verify")["results"]["primal"]
    assert res["case"] == 2 and res["T"] < res["horizon_bound"]
    assert res["sup_wx"] < 1


def test_decoupling_long_horizon_rejected(tmp_path, capsys):
    assert run(tmp_path, "primal", "--config", "decoupling-case2-long") == 3
    err = capsys.readouterr().err
    assert err.startswith("solver error") and "horizon gate" in err


def _write(tmp_path, mutate):
    cfg = json.loads(C.resolve("flat-theta-entropic")[1])
    mutate(cfg)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def test_rho_out_of_range(tmp_path, capsys):
    path = _write(tmp_path, lambda c: c["model"].__setitem__("rho", 1.2))
    assert run(tmp_path, "ergodic", "--config", str(path)) == 2
    err = capsys.readouterr().err
    # points at the offending line of the file
    assert "cfg.json:13: model/rho" in err


def test_missing_field(tmp_path, capsys):
    path = _write(tmp_path, lambda c: c["model"].pop("gamma"))
    assert run(tmp_path, "ergodic", "--config", str(path)) == 2
    assert "gamma" in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"model": {"rho": 0.5,,}}')
    assert run(tmp_path, "ergodic", "--config", str(path)) == 2
    assert "bad.json:1:23" in capsys.readouterr().err


def test_unknown_config(tmp_path, capsys):
    assert run(tmp_path, "ergodic", "--config", "no-such-scenario") == 2
    assert "flat-theta-entropic" in capsys.readouterr().err


def test_bad_arguments(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["primal"])
    assert e.value.code == 2
    assert run(tmp_path, "ergodic", "--config", "flat-theta-entropic", "--threads", "0") == 2


def test_seed_override_changes_hash(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["ergodic", "--config", "flat-theta-entropic", "--out-dir", str(a)]) == 0
    assert main(["ergodic", "--config", "flat-theta-entropic", "--out-dir", str(b), "--seed", "7"]) == 0
    ea, eb = envelope(a, "ergodic"), envelope(b, "ergodic")
    assert eb["seed"] == 7 and ea["config_hash"] != eb["config_hash"]


def test_deterministic_outputs(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        proc = subprocess.run([sys.executable, "-m", "forward_fbsde", "report", "--config", "flat-theta-entropic",
                               "--out-dir", str(d)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]
