"""Command line: every subcommand and flag, exit codes, config parsing."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from alkiax import load
from alkiax.cli import main
from alkiax.config import SCHEMA, load_config, parse_text, settings_from_values
from alkiax.errors import ConfigError
from alkiax.oracles import sincos

CHILD = Path(__file__).parent / "fixtures" / "child_oracle.py"

SINCOS = """\
# sin/cos on the unit square
oracle.kind = sincos
domain.lower = 0, 0
domain.upper = 1, 1
kernel.family = matern
kernel.nu = 1.5
kernel.length_scale = 0.8
alkiax.epsilon = 1e-1
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "sincos.cfg"
    cfg.write_text(SINCOS)
    model = root / "m.alkx"
    assert main(["approximate", "--config", str(cfg), "--out", str(model)]) == 0
    return root, cfg, model


def test_approximate_prints_report_and_writes_model(capsys, tmp_path, built):
    _, cfg, _ = built
    out_path = tmp_path / "again.alkx"
    code, out, err = run(capsys, "approximate", "--config", cfg, "--out", out_path, "--workers", 2, "--verbose")
    assert code == 0
    assert "kappa_bar" in out and f"model written to {out_path}" in out
    assert err.strip(), "verbose mode reports progress on stderr"
    assert load(out_path).epsilon == 0.1


def test_worker_count_does_not_change_the_model(tmp_path, built):
    _, cfg, model = built
    other = tmp_path / "w3.alkx"
    assert main(["approximate", "--config", str(cfg), "--out", str(other), "--workers", "3"]) == 0
    assert other.read_bytes() == model.read_bytes()


def test_evaluate_point(capsys, built):
    _, _, model = built
    code, out, _ = run(capsys, "evaluate", "--model", model, "--point", "0.3,0.6")
    assert code == 0
    assert float(out) == pytest.approx(sincos([0.3, 0.6])[0], abs=0.1)


def test_evaluate_points_file(capsys, tmp_path, built):
    _, _, model = built
    pts = tmp_path / "pts.csv"
    pts.write_text("0.1,0.2\n0.5,0.5\n1.5,0.5\n")
    code, out, _ = run(capsys, "evaluate", "--model", model, "--points-file", pts)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "x1,x2,h1,status"
    assert [line.rsplit(",", 1)[1] for line in lines[1:]] == ["ok", "ok", "outside"]
    assert lines[3].split(",")[2] == "nan"
    spaced = tmp_path / "pts.txt"
    spaced.write_text("0.1 0.2\n0.5 0.5\n")
    code, out2, _ = run(capsys, "evaluate", "--model", model, "--points-file", spaced, "--whitespace")
    assert code == 0 and out2.splitlines()[1:3] == lines[1:3]


def test_evaluate_errors(capsys, tmp_path, built):
    _, _, model = built
    assert run(capsys, "evaluate", "--model", model, "--point", "0.3")[0] == 1
    assert run(capsys, "evaluate", "--model", model, "--point", "a,b")[0] == 1
    code, _, err = run(capsys, "evaluate", "--model", model, "--point", "2,2")
    assert code == 1 and "OutOfDomainError" in err
    assert run(capsys, "evaluate", "--model", tmp_path / "missing.alkx", "--point", "0,0")[0] == 1
    # --point and --points-file are exclusive
    assert run(capsys, "evaluate", "--model", model, "--point", "0,0", "--points-file", "x")[0] == 1


def test_validate_exit_codes(capsys, tmp_path, built):
    _, cfg, model = built
    code, out, _ = run(capsys, "validate", "--model", model, "--config", cfg, "--grid", 41)
    assert code == 0
    header, row = out.splitlines()
    fields = dict(zip(header.split(","), row.split(",")))
    assert fields["checked"] == str(41 ** 2) and fields["violations"] == "0"
    wrong = tmp_path / "const.cfg"
    wrong.write_text("oracle.kind = constant\noracle.value = 5\ndomain.lower = 0 0\ndomain.upper = 1 1\n")
    code, out, err = run(capsys, "validate", "--model", model, "--config", wrong, "--grid", 11, "--show", 2)
    assert code == 2
    assert err.count("# violation at") == 2


def test_inspect_and_partition_export(capsys, tmp_path, built):
    _, _, model = built
    export = tmp_path / "leaves.txt"
    code, out, _ = run(capsys, "inspect", "--model", model, "--export-partition", export)
    assert code == 0
    table = dict(line.split(",", 1) for line in out.splitlines()[1:])
    assert table["dim"] == "2" and table["epsilon"] == "0.1" and len(table["build_digest"]) == 64
    leaves = export.read_text().splitlines()
    assert len(leaves) == int(table["leaf_count"])
    edges = [float(line.split()[3]) for line in leaves]
    assert sum(e ** 2 for e in edges) == pytest.approx(1.0)


def test_bench(capsys, built):
    _, _, model = built
    code, out, _ = run(capsys, "bench", "--model", model, "--queries", 300, "--seed", 4)
    assert code == 0
    header, row = out.splitlines()
    values = dict(zip(header.split(","), map(float, row.split(","))))
    assert values["queries"] == 300 and values["median_us"] > 0


def test_sweep(capsys, built):
    _, cfg, _ = built
    code, out, _ = run(capsys, "sweep", "--config", cfg, "--epsilons", "1e3,2e-1,1e-1")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("epsilon,samples") and len(lines) == 5
    assert lines[-1].startswith("# fitted slope")
    assert run(capsys, "sweep", "--config", cfg, "--epsilons", "1e-1,1")[0] == 1
    assert run(capsys, "sweep", "--config", cfg, "--epsilons", "x")[0] == 1


def test_usage_errors_exit_one(capsys):
    assert run(capsys, "approximate")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    code, _, err = run(capsys, "approximate", "--config", "/nonexistent.cfg", "--out", "x")
    assert code == 1 and "cannot read config" in err


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert all(key in out for key in SCHEMA)


def test_console_script_and_version():
    exe = Path(sys.executable).parent / "alkiax"
    cmd = [str(exe)] if exe.exists() else [sys.executable, "-m", "alkiax.cli"]
    res = subprocess.run(cmd + ["--version"], capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.strip() == "alkiax 0.1.0"


def test_external_oracle_through_config(capsys, tmp_path):
    cfg = tmp_path / "ext.cfg"
    cfg.write_text(f"oracle.kind = external\noracle.command = {sys.executable} {CHILD}\n"
                   "domain.lower = 0 0\ndomain.upper = 1 1\nalkiax.epsilon = 2e-1\nalkiax.cache = true\n")
    out_path = tmp_path / "ext.alkx"
    code, _, err = run(capsys, "approximate", "--config", cfg, "--out", out_path)
    assert code == 0, err
    model = load(out_path)
    assert model.output_dim == 1


# config parsing

def test_parse_text_rules():
    assert parse_text("# c\n\nalkiax.epsilon = 1e-2  # trailing\n") == {"alkiax.epsilon": "1e-2"}
    with pytest.raises(ConfigError, match="did you mean 'alkiax.epsilon'"):
        parse_text("epsilon = 1")
    with pytest.raises(ConfigError, match="--help"):
        parse_text("frobnicate = 1")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("alkiax.epsilon = 1\nalkiax.epsilon = 2")
    with pytest.raises(ConfigError, match=":2: expected"):
        parse_text("alkiax.epsilon = 1\njust words")


def test_settings_values_and_defaults():
    s = settings_from_values(parse_text(SINCOS + "alkiax.workers = 4\nalkiax.cache = yes\nalkiax.time_limit = 30\n"))
    assert s.approx.workers == 4 and s.approx.cache and s.approx.time_limit == 30.0
    assert s.approx.kernel.length_scale == 0.8 and s.domain.upper == (1.0, 1.0)
    with pytest.raises(ConfigError, match="required"):
        settings_from_values({"oracle.kind": "sincos"})
    assert settings_from_values({"oracle.kind": "sincos"}, require_epsilon=False).approx is None
    for bad in ({"alkiax.epsilon": "-1"}, {"alkiax.epsilon": "x"}, {"alkiax.epsilon": "1", "alkiax.cache": "maybe"},
                {"alkiax.epsilon": "1", "alkiax.gamma_mode": "guess"}, {"alkiax.epsilon": "1", "alkiax.gamma_mode": "oracle"},
                {"domain.lower": "0"}, {"domain.lower": "1", "domain.upper": "0"},
                {"alkiax.epsilon": "1", "kernel.family": "cubic"}):
        with pytest.raises(ConfigError):
            settings_from_values(bad)


def test_gamma_bound_forms():
    fixed = settings_from_values({"alkiax.epsilon": "1", "alkiax.gamma_mode": "oracle", "alkiax.gamma_bound": "3.5"})
    assert fixed.approx.gamma_oracle(np.zeros(2), 0.5, np.zeros(1)) == 3.5
    named = settings_from_values({"alkiax.epsilon": "1", "alkiax.gamma_mode": "oracle",
                                  "alkiax.gamma_bound": "oracles_for_tests:edge_scaled_bound"})
    assert named.approx.gamma_oracle(None, 0.5, None) == 6.0
    with pytest.raises(ConfigError, match="cannot import"):
        settings_from_values({"alkiax.epsilon": "1", "alkiax.gamma_mode": "oracle", "alkiax.gamma_bound": "nope:f"})
    with pytest.raises(ConfigError):
        settings_from_values({"alkiax.epsilon": "1", "alkiax.gamma_mode": "oracle", "alkiax.gamma_bound": "0"})


def test_oracle_kinds_from_config(tmp_path):
    def oracle(text):
        path = tmp_path / "o.cfg"
        path.write_text(text)
        return load_config(path, require_epsilon=False).make_oracle()

    const = oracle("oracle.kind = constant\noracle.value = 1, 2\ndomain.lower = 0\ndomain.upper = 2\n")
    assert const.query([1.0]).values.tolist() == [1.0, 2.0]
    syn = oracle("oracle.kind = synthetic\noracle.centers = 0 0; 1 1\noracle.coefficients = 1, 1\n"
                 "kernel.family = se\noracle.kernel.length_scale = 1\n")
    assert syn.norm == pytest.approx(np.sqrt(2 + 2 * np.exp(-2)), rel=1e-14)  # squared distance 2
    cstr = oracle("oracle.kind = cstr\noracle.horizon = 10\noracle.rate_state = 2\noracle.terminal_radius = none\n"
                  "domain.lower = -0.1 -0.1\ndomain.upper = 0.1 0.1\n")
    assert cstr.cfg.horizon == 10 and cstr.cfg.box_upper == (0.1, 0.1)
    with pytest.raises(ConfigError):
        oracle("oracle.kind = cstr\noracle.rate_state = 7\n")
    with pytest.raises(ConfigError):
        oracle("oracle.kind = teapot\n")
    with pytest.raises(ConfigError):
        oracle("oracle.kind = external\noracle.command = true\n")
    with pytest.raises(ConfigError):
        oracle("oracle.kind = synthetic\noracle.centers = 0 0; 1\noracle.coefficients = 1 1\n")
