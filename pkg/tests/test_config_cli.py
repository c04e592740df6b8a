import json

import numpy as np
import pytest

from tnl import spectral as sp
from tnl.cli import initial_field, main
from tnl.config import ConfigError, parse_config


def violations(text):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    return exc.value.violations


class TestParseConfig:
    def test_minimal_defaults(self):
        cfg = parse_config('{"kind": "clt_transport"}')
        assert cfg.N == 64 and cfg.n_list == (4, 8, 16)
        assert cfg.delta == 0.35 and cfg.s == 1.4
        assert json.loads(cfg.to_json())["kind"] == "clt_transport"

    def test_euler_beta_default(self):
        assert parse_config('{"kind": "clt_euler", "alpha": 0.6}').beta == pytest.approx(0.3)

    def test_n_list_too_large(self):
        v = violations('{"kind": "lln_transport", "N": 64, "n_list": [4, 32]}')
        assert [x.field for x in v] == ["n_list"]
        assert "n <= floor(N/3)" in v[0].constraint

    def test_band_window_doubles_radius(self):
        v = violations('{"kind": "clt_transport", "N": 64, "window": "band", "n_list": [4, 8, 16]}')
        assert "2n <= floor(N/3)" in v[0].constraint

    def test_beta_equal_alpha(self):
        v = violations('{"kind": "clt_euler", "alpha": 0.5, "beta": 0.5}')
        assert v[0].field == "beta"
        assert "open interval (0, alpha)" in v[0].constraint
        assert "stochastic convolution" in v[0].protects

    def test_all_violations_reported(self):
        v = violations('{"kind": "clt_transport", "N": 7, "dt": -1, "alpha": 1.5, "delta": 1.2, "bogus": 1}')
        assert {"N", "dt", "alpha", "delta", "bogus"} <= {x.field for x in v}

    def test_violation_names_the_result(self):
        v = violations('{"kind": "clt_transport", "delta": 0.6}')
        assert str(v[0]) == ("delta: must satisfy 0 < delta < min(alpha, 1 - gamma) (transport CLT rate)")

    @pytest.mark.parametrize("text", ["not json", "[1, 2]", '{"kind": "heat"}'])
    def test_schema(self, text):
        assert violations(text)

    def test_t_multiple_of_dt(self):
        assert violations('{"kind": "lln_euler", "T": 0.0105, "dt": 0.001}')[0].field == "T"

    def test_tail_path_floor(self):
        assert violations('{"kind": "ldp_tail", "paths": 50}')[0].field == "paths"

    def test_overrides_revalidate(self):
        cfg = parse_config('{"kind": "lln_transport"}')
        assert cfg.with_overrides(seed=7).seed == 7
        with pytest.raises(ConfigError):
            cfg.with_overrides(seed=-1)


class TestInitialField:
    def test_random_band_unit_norm(self):
        cfg = parse_config('{"kind": "lln_transport", "N": 32, "n_list": [2, 4]}')
        f = initial_field(cfg, sp.get_grid(32))
        assert sp.sobolev_norm(f, 0.0) == pytest.approx(1.0)

    def test_file(self, tmp_path):
        u = np.sin(2 * np.pi * np.arange(16) / 16)[:, None] * np.ones((1, 16))
        np.save(tmp_path / "f0.npy", u)
        cfg = parse_config(json.dumps({"kind": "lln_transport", "N": 16, "n_list": [2, 4], "init": "file",
                                       "init_file": str(tmp_path / "f0.npy")}))
        f = initial_field(cfg, sp.get_grid(16))
        assert np.allclose(f.to_physical(), u)

    def test_file_shape_mismatch(self, tmp_path):
        np.save(tmp_path / "f0.npy", np.zeros((8, 8)))
        cfg = parse_config(json.dumps({"kind": "lln_transport", "N": 16, "n_list": [2, 4], "init": "file",
                                       "init_file": str(tmp_path / "f0.npy")}))
        with pytest.raises(ValueError):
            initial_field(cfg, sp.get_grid(16))


SMALL_RATE = {"kind": "lln_transport", "N": 24, "T": 0.02, "dt": 0.001, "n_list": [2, 4], "paths": 32, "seed": 4}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


class TestRun:
    def test_artifacts_and_determinism(self, tmp_path):
        path = write_config(tmp_path, SMALL_RATE)
        assert main(["run", path, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
        assert main(["run", path, "--out", str(tmp_path / "b"), "--threads", "1"]) == 0
        for name in ("estimate.csv", "paths.csv", "estimate.dat"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
        assert meta["status"] == "ok" and meta["seed"] == 4
        assert set(meta["aborted"]) == {"2", "4"}
        assert "numpy" in meta["versions"]
        echo = json.loads((tmp_path / "a" / "config.json").read_text())
        assert echo["n_list"] == [2, 4]
        header = (tmp_path / "a" / "paths.csv").read_text().splitlines()[0]
        assert header == "path_id,t,quantity_name,value"

    def test_refuses_nonempty_dir(self, tmp_path, capsys):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        path = write_config(tmp_path, SMALL_RATE)
        assert main(["run", path, "--out", str(out)]) == 2
        assert "non-empty" in capsys.readouterr().err
        assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]

    def test_force(self, tmp_path):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        cfg = {"kind": "noise_checks"}
        assert main(["run", write_config(tmp_path, cfg), "--out", str(out), "--force"]) == 0

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TNL_SEED", "11")
        assert main(["run", write_config(tmp_path, SMALL_RATE), "--out", str(tmp_path / "o"), "--threads", "1"]) == 0
        assert json.loads((tmp_path / "o" / "metadata.json").read_text())["seed"] == 11

    def test_bad_environment_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TNL_SEED", "abc")
        assert main(["run", write_config(tmp_path, SMALL_RATE), "--out", str(tmp_path / "o")]) == 2

    def test_noise_checks_dispatch(self, tmp_path):
        out = tmp_path / "nc"
        assert main(["run", write_config(tmp_path, {"kind": "noise_checks"}), "--out", str(out)]) == 0
        rows = (out / "checks.csv").read_text().splitlines()
        assert rows[0] == "name,value,threshold,passed"
        assert len(rows) > 1 and all(r.endswith("True") for r in rows[1:])

    def test_invalid_config_exit(self, tmp_path, capsys):
        path = write_config(tmp_path, {"kind": "clt_euler", "beta": 0.5})
        assert main(["run", path, "--out", str(tmp_path / "o")]) == 2
        assert "beta" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_ldp_minimize(self, tmp_path):
        cfg = {"kind": "ldp_minimize", "control_scale": 0.3, "lam": 1e4, "max_iter": 300}
        out = tmp_path / "ldp"
        assert main(["run", write_config(tmp_path, cfg), "--out", str(out)]) == 0
        res = json.loads((out / "result.json").read_text())
        assert res["monotone"] and res["fd_max_rel_error"] < 1e-4
        assert res["ratio"] <= 1.0
        assert (out / "control_recovered.csv").exists() and (out / "trace.csv").exists()

    def test_ldp_tail(self, tmp_path):
        cfg = {"kind": "ldp_tail", "N": 24, "T": 0.02, "paths": 100, "n_list": [2, 4]}
        out = tmp_path / "tail"
        assert main(["run", write_config(tmp_path, cfg), "--out", str(out)]) == 0
        rows = (out / "tail.csv").read_text().splitlines()
        assert rows[0].startswith("n,epsilon,hits,paths,p_hat")
        assert len(rows) == 3


class TestValidateAndChecks:
    def test_validate_prints_defaults(self, tmp_path, capsys):
        assert main(["validate", write_config(tmp_path, {"kind": "lln_euler"})]) == 0
        assert json.loads(capsys.readouterr().out)["delta"] == 1.0

    def test_validate_rejects(self, tmp_path, capsys):
        assert main(["validate", write_config(tmp_path, {"kind": "lln_euler", "N": 64, "n_list": [4, 32]})]) == 1
        assert "n_list" in capsys.readouterr().err

    def test_checks_command(self, capsys):
        assert main(["checks", "structural"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert all(line.startswith("[PASS]") for line in out[:-1])
        assert out[-1].startswith("11/11 checks passed")

    def test_unknown_suite(self):
        with pytest.raises(SystemExit):
            main(["checks", "nonsense"])
