import json
from pathlib import Path

import pytest

from resnet_limits import cli
from resnet_limits.bench import read_errors_csv

SMALL = {
    "seed": 3,
    "K": 2,
    "shape": {"L": 2, "M": 4, "D": 8},
    "hp": {"eta_u": 0.05, "eta_v": 0.05},
    "grid": {"n_steps": 20},
    "sweep": {"shapes": [[2, 4, 8], [2, 8, 8], [4, 4, 16], [4, 16, 8]], "seeds": [0, 1]},
    "dmft": {"P": 200, "n_mc": 200},
    "clt": {"n_values": [100, 400], "n_mc": 20000},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = Path(tmp_path) / name
    p.write_text(json.dumps(cfg, indent=1))
    return p


def run_cli(tmp_path, command, cfg, *overrides, out="out"):
    path = write_config(tmp_path, cfg)
    code = cli.main([command, str(path), f"--output_dir={Path(tmp_path) / out}", *overrides])
    dirs = sorted((Path(tmp_path) / out).glob("*"))
    return code, dirs


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_unknown_key_names_key_and_line(tmp_path):
    path = write_config(tmp_path, {**SMALL, "shape": {"L": 2, "M": 4, "D": 8, "Q": 1}})
    with pytest.raises(cli.ConfigError, match=r"shape\.Q.*line \d+"):
        cli.load_config(path)


def test_missing_shape_key(tmp_path, capsys):
    cfg = {**SMALL, "shape": {"M": 4, "D": 8}}
    code, _ = run_cli(tmp_path, "train", cfg)
    assert code == cli.EXIT_CONFIG
    assert "shape.L" in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path):
    p = Path(tmp_path) / "bad.json"
    p.write_text('{\n "seed": 1,\n "K": }\n')
    with pytest.raises(cli.ConfigError, match="line 3"):
        cli.load_config(p)


def test_overrides_and_env_seed(tmp_path):
    path = write_config(tmp_path, SMALL)
    cfg = cli.load_config(path, ["--shape.D=32", "--hp.eta_u=0.5", "--act.kind=tanh"], env={})
    assert cfg["shape"]["D"] == 32 and cfg["hp"]["eta_u"] == 0.5 and cfg["act"]["kind"] == "tanh"
    assert cfg["hp"]["sigma_u"] == 1.0
    assert cli.load_config(path, env={cli.SEED_ENV: "17"})["seed"] == 17
    with pytest.raises(cli.ConfigError):
        cli.load_config(path, ["--shape.D"], env={})
    with pytest.raises(cli.ConfigError):
        cli.load_config(path, ["--nope=1"], env={})


def test_run_id_ignores_volatile_keys(tmp_path):
    path = write_config(tmp_path, SMALL)
    a = cli.load_config(path, ["--threads=1", "--output_dir=x"], env={})
    b = cli.load_config(path, ["--threads=8", "--output_dir=y"], env={})
    c = cli.load_config(path, ["--seed=4"], env={})
    assert cli.run_id(a, "train") == cli.run_id(b, "train") != cli.run_id(c, "train")


def test_train_k0_records_initialization(tmp_path):
    code, dirs = run_cli(tmp_path, "train", {**SMALL, "K": 0})
    assert code == 0 and len(dirs) == 1
    recs = read_errors_csv(dirs[0] / "errors.csv")
    assert [r.k for r in recs] == [0]


def test_sweep_outputs(tmp_path):
    code, dirs = run_cli(tmp_path, "sweep", SMALL)
    assert code == 0
    out = dirs[0]
    recs = read_errors_csv(out / "errors.csv")
    assert len(recs) == 4 * 2 * (SMALL["K"] + 1)
    assert (out / "fits.csv").read_text().count("\n") == 3
    side = json.loads((out / "sweep.json").read_text())
    assert side["seeds"] == [0, 1]


def test_single_shape_fit_fails_with_manifest(tmp_path):
    cfg = {**SMALL, "sweep": {"shapes": [[2, 4, 8]], "seeds": [0]}}
    code, dirs = run_cli(tmp_path, "sweep", cfg)
    assert code == cli.EXIT_FAILED_RUNS
    fails = json.loads((dirs[0] / "failures.json").read_text())["failures"]
    assert {f["error"] for f in fails} == {"UnderdeterminedFitError"}


def test_diverging_run_is_reported_and_sweep_continues(tmp_path):
    cfg = {**SMALL, "hp": {"eta_u": 0.3, "eta_v": 0.3}, "K": 4,
           "sweep": {"shapes": [[2, 1, 128], [1, 1, 64]], "seeds": [0, 1], "fit_models": []}}
    code, dirs = run_cli(tmp_path, "sweep", cfg)
    assert code == cli.EXIT_FAILED_RUNS
    fails = json.loads((dirs[0] / "failures.json").read_text())["failures"]
    assert len(fails) == 2 and all(f["error"] == "NumericalOverflowError" and f["L"] == 2 for f in fails)
    assert len(read_errors_csv(dirs[0] / "errors.csv")) == 2 * 5


def test_diverging_limit_is_a_numerical_failure(tmp_path):
    cfg = {**SMALL, "hp": {"eta_u": 1e8, "eta_v": 1e8}, "K": 4}
    code, dirs = run_cli(tmp_path, "limit-linear", cfg)
    assert code == cli.EXIT_NUMERICAL
    assert json.loads((dirs[0] / "failures.json").read_text())["failures"][0]["error"] == "NumericalOverflowError"


def test_fit_from_errors_csv(tmp_path):
    _, dirs = run_cli(tmp_path, "sweep", SMALL)
    cfg = {**SMALL, "fit": {"errors_csv": str(dirs[0] / "errors.csv"), "models": ["h_rate", "y_rate"]}}
    code, fdirs = run_cli(tmp_path, "fit", cfg, out="fit")
    assert code == 0
    assert (fdirs[0] / "fits.csv").read_text().splitlines()[0] == "model,alpha,beta,r2,n_points"


def test_limit_commands(tmp_path):
    code, dirs = run_cli(tmp_path, "limit-linear", {**SMALL, "K": 1})
    assert code == 0
    state = json.loads((dirs[0] / "limit_linear.json").read_text())
    assert state["y"] == [[0.0, 0.0, 0.0]]
    code, dirs = run_cli(tmp_path, "limit-dmft", {**SMALL, "K": 1, "act": {"kind": "tanh"}}, out="d")
    assert code == 0
    assert json.loads((dirs[0] / "dmft_summary.json").read_text())["picard"] == []


def test_clt_linear_gap_is_noise(tmp_path):
    code, dirs = run_cli(tmp_path, "clt", {**SMALL, "clt": {**SMALL["clt"], "f_id": "linear"}})
    assert code == 0
    rows = (dirs[0] / "clt.csv").read_text().splitlines()[1:]
    for row in rows:
        _, _, gap, se = row.split(",")
        assert float(gap) <= 3 * float(se) + 1e-12


def test_dmft_nonconvergence_exit_code(tmp_path):
    cfg = {**SMALL, "K": 2, "act": {"kind": "tanh"}, "dmft": {"P": 200, "n_mc": 200, "picard_max_iters": 1}}
    code, dirs = run_cli(tmp_path, "limit-dmft", cfg)
    assert code == cli.EXIT_NUMERICAL
    fail = json.loads((dirs[0] / "failures.json").read_text())["failures"][0]
    assert fail["error"] == "NonConvergenceError" and len(fail["residuals"]) == 1


def determinism_case(tmp_path, command, cfg):
    """Run a subcommand twice at 1 thread and once at 8; return the three output trees."""
    trees = []
    for i, threads in enumerate((1, 1, 8)):
        code, dirs = run_cli(tmp_path, command, cfg, f"--threads={threads}", out=f"{command}-{i}")
        assert code == 0, command
        trees.append(tree_bytes(Path(tmp_path) / f"{command}-{i}"))
    return trees


@pytest.mark.parametrize("command", ["train", "limit-linear", "limit-dmft", "sweep", "clt"])
def test_byte_identical_outputs(tmp_path, command):
    cfg = {**SMALL, "act": {"kind": "tanh"}} if command == "limit-dmft" else SMALL
    a, b, c = determinism_case(tmp_path, command, cfg)
    assert a and a == b == c
