import copy
import json

import numpy as np
import pytest

from magnetohom.errors import ConvergenceError
from magnetohom.harness import acceptance, runner
from magnetohom.harness.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERIC, EXIT_OK, main
from magnetohom.harness.config import ConfigError, from_dict, load_config
from magnetohom.harness.presets import PRESETS, preset
from magnetohom.errors import ValidationError

LAME = {"lambda": 1.0, "mu": 1.0, "rho": 1.0}


def small(**over):
    d = {"name": "small", "mesh": {"n": 16}, "lame": dict(LAME), "T": 0.25, "epsilons": [1 / 8, 1 / 16],
         "fields": [{"kind": "time_exp", "amplitude": 1.0, "rho": 1.0}],
         "data": {"u0": [[0, 1, 1, 1.0], [1, 2, 1, 0.5]], "u1": [[1, 1, 1, 1.0]]}}
    d.update(over)
    return d


def write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


class TestConfig:
    @pytest.mark.parametrize("path,patch", [
        ("mesh.n", lambda d: d["mesh"].update(n=0)),
        ("lame.mu", lambda d: d["lame"].update(mu=-1.0)),
        ("T", lambda d: d.update(T=0)),
        ("fields.0.kind", lambda d: d["fields"][0].update(kind="magic")),
        ("epsilons", lambda d: d.update(epsilons=[])),
        ("<root>", lambda d: d.update(colour="red")),
    ])
    def test_errors_name_field(self, path, patch):
        d = small()
        patch(d)
        with pytest.raises(ConfigError) as exc:
            from_dict(d)
        assert exc.value.path == path

    def test_dt_policy(self):
        with pytest.raises(ConfigError, match="eps"):
            from_dict(small(dt=0.01))
        with pytest.raises(ConfigError, match="exceeds"):
            from_dict(small(fields=[], dt=0.2))
        assert from_dict(small(dt=1 / 200)).dt == 1 / 200

    def test_lame_bounds(self):
        d = small()
        d["lame"]["lambda"] = 0.0
        assert from_dict(d).lame["lambda"] == 0.0
        d["lame"]["lambda"] = -0.5
        with pytest.raises(ConfigError) as exc:
            from_dict(d)
        assert exc.value.path == "lame.lambda"

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")
        (tmp_path / "bad.json").write_text("{oops")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(tmp_path / "bad.json")
        (tmp_path / "list.json").write_text("[]")
        with pytest.raises(ConfigError, match="object"):
            load_config(tmp_path / "list.json")

    def test_round_trip(self, tmp_path):
        cfg = from_dict(small())
        cfg.write_json(tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_with_options(self):
        cfg = from_dict(small())
        c2 = cfg.with_options(T=0.5, n_cells=4)
        assert c2.T == 0.5 and c2.options["n_cells"] == 4 and cfg.T == 0.25


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_validate(self, name):
        cfg = preset(name)
        assert cfg.name == name and cfg.lame == LAME

    def test_unknown(self):
        with pytest.raises(ValidationError, match="foo"):
            preset("foo")

    def test_time_bessel_oracle(self):
        from oracles import bessel_j0_series
        assert preset("time-bessel").oracles["J0(1)"] == pytest.approx(bessel_j0_series(1.0), abs=1e-14)

    def test_every_preset_has_checks(self):
        assert set(runner.PRESET_CHECKS) == set(PRESETS)
        covered = {c for v in runner.PRESET_CHECKS.values() for c in v}
        assert covered == set(acceptance.CHECKS)


class TestFieldsFromConfig:
    def test_modes(self):
        x = np.array([[0.5, 0.5], [0.25, 0.5]])
        u = acceptance.modes_to_field([[0, 1, 1, 2.0], [1, 2, 1, 1.0]], x)
        np.testing.assert_allclose(u, [[2.0, 0.0], [np.sqrt(2.0), 1.0]], atol=1e-15)
        assert np.all(acceptance.modes_to_field(None, x) == 0)

    def test_build_fields(self):
        cfg = preset("full-system")
        f = acceptance.build_fields(cfg, 1 / 8)
        assert set(f) == {"space_strong", "spacetime_bounded", "compact"}
        assert f["space_strong"].epsilon == 1 / 8


class TestCli:
    def test_invalid_config_exit_2(self, tmp_path, capsys):
        d = small()
        d["mesh"]["n"] = 0
        code = main(["simulate", "--config", str(write(tmp_path, d)), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        assert "mesh.n" in capsys.readouterr().err

    def test_missing_source_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])
        assert exc.value.code == 2

    def test_workers_validated(self, tmp_path):
        assert main(["simulate", "--config", str(write(tmp_path, small())), "--workers", "0"]) == EXIT_CONFIG

    def test_simulate_outputs_and_determinism(self, tmp_path):
        cfgp = write(tmp_path, small())
        for out in ("a", "b"):
            assert main(["simulate", "--config", str(cfgp), "--out", str(tmp_path / out), "--workers", "2"]) == 0
        for name in ("trajectory_eps8.csv", "energy_eps8.csv", "trajectory_eps16.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rep = json.loads((tmp_path / "a" / "simulate_report.json").read_text())
        assert rep["status"] == "OK" and rep["versions"]["numpy"] == np.__version__
        assert all(v["energy_drift"] < 1e-10 for v in rep["notes"].values())

    def test_numerical_failure_exit_3(self, tmp_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise ConvergenceError("no convergence")
        monkeypatch.setattr(runner, "integrate", boom)
        code = main(["simulate", "--config", str(write(tmp_path, small())), "--out", str(tmp_path / "o")])
        assert code == EXIT_NUMERIC
        assert "simulate/small/eps" in capsys.readouterr().err

    def test_corrector_zero_field(self, tmp_path):
        d = small(mesh={"n": 32}, fields=[{"kind": "space_strong", "amplitude": 0.0, "profile": "sin_y1"}],
                  options={"n_cells": 4})
        assert main(["corrector", "--config", str(write(tmp_path, d)), "--out", str(tmp_path)]) == EXIT_OK
        rep = json.loads((tmp_path / "corrector_report.json").read_text())
        for note in rep["notes"].values():
            assert np.all(np.asarray(note["M_interior_mean"]) == 0)
        assert main(["effective-mass", "--config", str(write(tmp_path, d)), "--out", str(tmp_path)]) == EXIT_OK
        em = json.loads((tmp_path / "effective_mass.json").read_text())
        assert em["cell_oracle"]["matrix"] == [[0.0, 0.0], [0.0, 0.0]]

    def test_effective_mass_time(self, tmp_path):
        assert main(["effective-mass", "--config", str(write(tmp_path, small())), "--out", str(tmp_path)]) == 0
        em = json.loads((tmp_path / "effective_mass.json").read_text())
        M = np.asarray(em["time_bessel"]["matrix"])
        np.testing.assert_allclose(M, 1.707862 * np.eye(2), rtol=1e-6)

    def test_homogenize_time(self, tmp_path):
        assert main(["homogenize", "--config", str(write(tmp_path, small())), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "homogenized.csv").exists() and (tmp_path / "homogenized_energy.csv").exists()

    def test_verify_selected_check(self, tmp_path, capsys):
        code = main(["verify", "--preset", "time-bessel", "--checks", "a5", "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert "A5 PASS" in capsys.readouterr().out
        rep = json.loads((tmp_path / "verify_report.json").read_text())
        assert [v["id"] for v in rep["verdicts"]] == ["A5"]

    def test_verify_unknown_check(self, tmp_path):
        assert main(["verify", "--checks", "A99", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_verify_unmapped_config(self, tmp_path):
        assert main(["verify", "--config", str(write(tmp_path, small())), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_verify_fail_exit_1(self, tmp_path, monkeypatch):
        bad = acceptance.Verdict("A5", "mass inequality", False, 1.0, 0.0)
        monkeypatch.setitem(acceptance.CHECKS, "A5", lambda cfg=None: bad)
        assert main(["verify", "--checks", "A5", "--out", str(tmp_path)]) == EXIT_FAIL


class TestVerify:
    def test_inputs_not_mutated(self, tmp_path):
        cfg = preset("time-bessel")
        before = copy.deepcopy(cfg.to_dict())
        rep = runner.verify(cfg, tmp_path, checks=["A5"])
        assert cfg.to_dict() == before
        assert not rep.failed

    def test_verdict_line(self):
        v = acceptance.Verdict("A1", "energy", True, 1e-12, 1e-10, flags=["x"], elapsed=1.0)
        assert v.status == "FLAGGED"
        assert v.line().startswith("A1 PASS: energy")
        assert v.line().endswith("[flagged: x]")
        assert acceptance.Verdict("A1", "e", False, 1.0, 0.0).status == "FAIL"
        assert v.to_dict()["status"] == "FLAGGED"
