import subprocess
import sys

import pytest

from risksens.cli import ConfigError, build_config, main, parse_config_text


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_parse_config():
    vals = parse_config_text("# comment\ntheta = 2.0\nsigma = 0.3, 0.1\nn_paths = 1000\n")
    assert vals == {"theta": 2.0, "sigma": (0.3, 0.1), "n_paths": 1000}
    cfg, _ = build_config(vals, seed=7, steps=32)
    assert cfg.params.theta == 2.0 and cfg.seed == 7 and cfg.sde_grid.n_steps == 32


@pytest.mark.parametrize("text", ["thetaa = 1", "theta", "sigma = 0.3", "n_paths = 1.5",
                                  "theta = 1\ntheta = 2", "theta = abc"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_semantic_errors():
    with pytest.raises(ConfigError):
        build_config({"theta": -1.0})
    with pytest.raises(ConfigError):
        build_config({"perturbations": (0.0,)})


def test_coeffs_command(tmp_path):
    out = tmp_path / "new" / "dir"
    assert main(["coeffs", "--out", str(out)]) == 0
    lines = (out / "coeffs.csv").read_text().splitlines()
    assert lines[0] == "t,gamma,phi,k,rho"
    assert len(lines) == 2561 + 1


def test_coeffs_degenerate(tmp_path):
    cfg = write_cfg(tmp_path, "A = 0\nn_steps = 16\n")
    assert main(["coeffs", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "coeffs.csv").read_text().splitlines()[1:]
    assert len(rows) == 161
    assert all(float(r.split(",")[1]) == 0.0 for r in rows)


def test_bad_key_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "thetaa = 1\n")
    assert main(["coeffs", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["coeffs", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_verify_pass_and_fault(tmp_path):
    assert main(["verify", "--out", str(tmp_path / "ok")]) == 0
    text = (tmp_path / "ok" / "relations.txt").read_text()
    assert "FAIL" not in text
    assert main(["verify", "--out", str(tmp_path / "bad"), "--fault", "swap-gamma-rho"]) == 1
    assert "hjb_along_path: FAIL" in (tmp_path / "bad" / "relations.txt").read_text()


def test_verify_degenerate_zero_violations(tmp_path):
    cfg = write_cfg(tmp_path, "A = 0\n")
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 0
    text = (tmp_path / "relations.txt").read_text()
    assert "p_equals_Vx: PASS violation=0 " in text
    assert "gamma_equals_rho: PASS violation=0 " in text


def test_hjb_scan_command(tmp_path):
    cfg = write_cfg(tmp_path, "scan_t = 3\nscan_x = 3\n")
    assert main(["hjb-scan", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "hjb_scan.csv").read_text().splitlines()
    assert lines[0] == "t,x,residual,u_star" and len(lines) == 10


def test_quick_experiment_is_deterministic_and_fast(tmp_path):
    import time

    cfg = write_cfg(tmp_path, "n_paths = 1000\n")
    outs = []
    for i in range(2):
        start = time.perf_counter()
        assert main(["experiment", "--config", cfg, "--out", str(tmp_path / f"o{i}")]) == 0
        elapsed = time.perf_counter() - start
        outs.append(tmp_path / f"o{i}")
    assert elapsed < 5.0
    for name in ("coeffs.csv", "optimality.csv", "relations.txt", "experiment.txt",
                 "theta_sweep.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_seed_flag_changes_output(tmp_path):
    cfg = write_cfg(tmp_path, "n_paths = 1000\ntheta_sweep = 1\nn_steps = 32\n")
    main(["experiment", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["experiment", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "9"])
    assert ((tmp_path / "a" / "optimality.csv").read_bytes()
            != (tmp_path / "b" / "optimality.csv").read_bytes())


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "risksens", "coeffs", "--steps", "8",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "coeffs.csv").exists()
