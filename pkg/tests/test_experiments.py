import numpy as np
import pytest

from smpfield import cli, config, experiments
from smpfield.errors import ConfigError, InputError
from smpfield.stats import MCEstimate, richardson_weights, slope

SMALL = """
name = "small-{name}"
expect_fail = {expect_fail}
expected_failures = {expected}

[problem]
name = "scalar-lq"
params = {{ D = 0.5, control = "{control}", G = 1.0 }}

[grid]
n_steps = 50

[mc]
n_paths = 300
seed = 4

[checks]
run = {checks}
thm35 = {{ n_samples = 3 }}
lqcert = {{ n_samples = 3 }}
"""


def small_cfg(tmp_path, control="riccati", checks='["lemma33", "thm34", "thm35", "lq44", "lqcert"]',
              expect_fail="false", expected="[]", name="cfg"):
    p = tmp_path / f"{name}.toml"
    p.write_text(SMALL.format(name=name, control=control, checks=checks, expect_fail=expect_fail, expected=expected))
    return p


def test_slope_examples():
    xs = [0.2, 0.1, 0.05, 0.025]
    fit = slope(xs, [x * x for x in xs])
    assert fit.slope == pytest.approx(2.0) and fit.upper - fit.lower == pytest.approx(0.0, abs=1e-9)
    assert slope(xs, [3.0] * 4).slope == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputError):
        slope(xs, [1.0, 0.0, 1.0, 1.0])
    with pytest.raises(InputError):
        slope(xs[:2], [1.0, 1.0])


def test_richardson_weights_reproduce_polynomials():
    eps = [0.2, 0.1, 0.05, 0.025]
    w = richardson_weights(eps)
    for coeffs in ([1.0], [2.0, -3.0], [0.5, 1.0, 4.0, -2.0]):
        vals = [np.polyval(coeffs[::-1], e) for e in eps]
        assert np.dot(w, vals) == pytest.approx(coeffs[0])


def test_mc_estimate():
    e = MCEstimate.from_samples([1.0, 1.0, 1.0])
    assert e.deterministic and e.se == 0.0
    e = MCEstimate.from_samples([0.0, 2.0])
    assert e.mean == 1.0 and e.se == pytest.approx(1.0)
    assert e.within(2.5, n_se=3.0) and not e.within(5.0)


def test_shipped_configs_validate():
    for name in ("scalar-lq-benchmark", "suboptimal-control", "scalar-bilinear", "deterministic-lq",
                 "bilinear-curved"):
        cfg = config.load(cli._resolve(name))
        assert cfg["name"] == name


def test_unknown_keys_are_errors():
    with pytest.raises(ConfigError, match=r"\[grid\]"):
        config.loads('[problem]\nname = "lq"\n[grid]\nn_step = 10\n')
    with pytest.raises(ConfigError, match=r"\[top-level\]"):
        config.loads('colour = 1\n[problem]\nname = "lq"\n')
    with pytest.raises(ConfigError, match=r"checks\.run"):
        config.loads('[problem]\nname = "lq"\n[checks]\nrun = ["thm99"]\n')
    with pytest.raises(ConfigError, match=r"\[file\]"):
        config.loads("[problem\n")


def test_expect_fail_needs_expected_failures():
    with pytest.raises(ConfigError, match="expected_failures"):
        config.loads('expect_fail = true\n[problem]\nname = "lq"\n')


def test_bad_problem_names_block(tmp_path):
    cfg = config.loads('[problem]\nname = "nope"\n[grid]\nn_steps = 5\n')
    with pytest.raises(ConfigError, match=r"\[problem\]"):
        experiments.run(cfg)
    cfg = config.loads('[problem]\nname = "scalar-bilinear"\n[grid]\nn_steps = 5\n[checks]\nrun = ["lq44"]\n')
    with pytest.raises(ConfigError, match=r"\[checks\]"):
        experiments.run(cfg)


def test_empty_checks_block():
    cfg = config.loads('[problem]\nname = "scalar-lq"\n[grid]\nn_steps = 10\n')
    rep = experiments.run(cfg)
    assert rep.checks == [] and rep.passed and rep.exit_code == 0
    assert rep.wall_clock < 5.0


def test_small_benchmark_passes_and_writes_provenance(tmp_path):
    cfg = config.load(small_cfg(tmp_path))
    rep = experiments.run(cfg)
    assert rep.passed, rep.text()
    files = rep.write(tmp_path / "out")
    h = config.config_hash(cfg)
    for f in files[1:]:
        assert open(f).readline().strip() == f"# config_hash={h}"
    assert "aggregate: PASS" in open(files[0]).read()


def test_expected_failure_mode(tmp_path):
    p = small_cfg(tmp_path, control="zero", checks='["thm34", "lq44"]', expect_fail="true",
                  expected='["thm34", "lq44"]', name="sub")
    rep = experiments.run(config.load(p))
    assert set(rep.failed) == {"thm34", "lq44"}
    assert rep.exit_code == 0 and "EXPECTED-FAIL" in rep.aggregate()
    # listed failure that does not happen: not the designed outcome
    p = small_cfg(tmp_path, control="riccati", checks='["thm34", "lq44"]', expect_fail="true",
                  expected='["thm34"]', name="wrong")
    assert experiments.run(config.load(p)).exit_code == 1


def test_reports_identical_across_thread_counts(tmp_path):
    cfg = config.load(small_cfg(tmp_path, checks='["thm32", "lemma33", "thm34", "thm35", "lq44"]'))
    texts, csvs = [], []
    for threads in (1, 3):
        rep = experiments.run(experiments.apply_overrides(cfg, threads=threads))
        out = tmp_path / f"t{threads}"
        files = rep.write(out)
        texts.append(rep.numeric_text())
        csvs.append([open(f, "rb").read() for f in files[1:]])
    assert texts[0] == texts[1]
    assert csvs[0] == csvs[1]


def test_cli_commands(tmp_path, capsys):
    assert cli.main(["list-problems"]) == 0
    out = capsys.readouterr().out
    assert "scalar-bilinear" in out and "suboptimal-control" in out
    p = small_cfg(tmp_path, checks='["lq44"]')
    assert cli.main(["validate", str(p)]) == 0
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o"), "--paths", "200", "--seed", "3"]) == 0
    assert (tmp_path / "o" / "lq44.csv").exists()
    sub = small_cfg(tmp_path, control="zero", checks='["lq44"]', name="z")
    assert cli.main(["run", str(sub), "--out", str(tmp_path / "z")]) == 1
    assert cli.main(["validate", str(tmp_path / "missing.toml")]) == 2
    assert cli.main(["run", str(p), "--paths", "1"]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.slow
def test_curved_bilinear_config_has_vanishing_remainder():
    cfg = config.load(cli._resolve("bilinear-curved"))
    cfg = dict(cfg, checks=dict(cfg["checks"], run=["prop32"]))
    rep = experiments.run(cfg)
    sups = [r[1] for r in rep.checks[0].rows]
    assert all(b < a for a, b in zip(sups, sups[1:]))
    assert rep.passed, rep.text()
