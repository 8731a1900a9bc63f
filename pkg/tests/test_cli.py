import json

import pytest

from chaoskit import __version__
from chaoskit.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    csv_text,
    emit_config,
    emit_csv,
    emit_loglog_chart,
    main,
    parse_config,
    parse_document,
)
from chaoskit.errors import ConfigError, InvalidInputError
from chaoskit.metrics import RateReport, RateRow

MINIMAL = """
scenario: example1
study: poc_in_N
particle_counts: [16, 32]
proxy_count: 64
dt: 2^-6
"""

TINY_RUN = """
scenario: example1
particle_counts: [4, 8]
proxy_count: 16
dt: 2^-3
repetitions: 2
"""


def power_law_report():
    rows = [RateRow(float(n), n**-0.5, 0.0, 4) for n in (16, 64, 256)]
    return RateReport("poc_in_N:synthetic:d1", 2.0, rows).fit()


def test_minimal_document_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.dt == 2.0**-6
    assert cfg.T == 1.0 and cfg.repetitions == 4 and cfg.p_values == (2.0,)
    assert cfg.seeds == (0, 1, 2, 3)
    assert cfg.particle_counts == (16, 32) and cfg.proxy_count == 64


def test_proxy_count_must_exceed():
    with pytest.raises(ConfigError, match="proxy_count must exceed") as info:
        parse_config(MINIMAL.replace("proxy_count: 64", "proxy_count: 32"))
    assert info.value.key == "proxy_count"


def test_three_norms():
    cfg = parse_config(MINIMAL + "p_values: [2, 4, 6]\n")
    assert cfg.p_values == (2.0, 4.0, 6.0)


@pytest.mark.parametrize("text, key", [
    (MINIMAL + "colour: blue\n", "colour"),
    (MINIMAL + "schema_version: 7\n", "schema_version"),
    (MINIMAL + "dt_ladder: 3\n", "dt_ladder"),
    (MINIMAL.replace("dt: 2^-6", "dt: tiny"), "dt"),
    (MINIMAL + "output: {dir: x, colour: 1}\n", "output.colour"),
    ("scenario: [unclosed", ""),
    ("- just\n- a list\n", ""),
    (MINIMAL + "seeds: [1, 2]\nrepetitions: 3\n", "seeds"),
])
def test_rejections_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_document(text)
    assert info.value.key == key


def test_seeds_set_repetitions():
    cfg = parse_config(MINIMAL + "seeds: [5, 9]\n")
    assert cfg.seeds == (5, 9) and cfg.repetitions == 2


def test_config_round_trip():
    for text in (MINIMAL, MINIMAL + "p_values: [2, 4]\nseeds: [3, 1]\nT: 2\n",
                 "scenario: example1\nstudy: strong_in_dt\ndt_ladder: [2^-6, 2^-5, 2^-4]\nn_particles: 8\n"):
        cfg, out = parse_document(text)
        again, out2 = parse_document(emit_config(cfg, out))
        assert again == cfg and out2 == out


def test_csv_layout():
    text = csv_text(power_law_report())
    lines = text.splitlines()
    assert lines[0] == "study,p,abscissa,error_mean,error_stderr,reps"
    assert len(lines) == 1 + 3 + 3
    assert [l.split(",")[0] for l in lines[-3:]] == ["slope", "intercept", "r_squared"]
    slope = float(lines[-3].split(",")[1])
    assert slope == pytest.approx(-0.5, abs=1e-15)
    assert lines[1].split(",")[3] == format(16**-0.5, ".17g")


def test_csv_two_rows(tmp_path):
    rep = RateReport("x", 2.0, [RateRow(16, 0.5, 0.1, 4), RateRow(64, 0.25, 0.1, 4)]).fit()
    path = emit_csv(rep, tmp_path / "r.csv")
    assert len(path.read_text().splitlines()) == 6
    with pytest.raises(InvalidInputError):
        emit_csv(RateReport("x", 2.0, []), tmp_path / "e.csv")


def test_chart(tmp_path):
    path = emit_loglog_chart(power_law_report(), tmp_path / "c.svg")
    svg = path.read_text()
    assert svg.startswith("<?xml") and "<svg" in svg
    assert "fitted slope -0.5" in svg
    assert "stroke-dasharray" in svg
    again = emit_loglog_chart(power_law_report(), tmp_path / "d.svg").read_text()
    assert again == svg
    with pytest.raises(InvalidInputError):
        emit_loglog_chart(RateReport("x", 2.0, []), tmp_path / "e.svg")


def test_run_end_to_end_deterministic(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(TINY_RUN)
    monkeypatch.setenv("CHAOSKIT_THREADS", "1")
    assert main(["run", str(cfg), "--out", str(tmp_path / "a"), "--format", "both", "--chart"]) == 0
    monkeypatch.setenv("CHAOSKIT_THREADS", "3")
    assert main(["run", str(cfg), "--out", str(tmp_path / "b"), "--format", "both", "--chart"]) == 0
    name = "poc_in_N_example1_d1_p2"
    for suffix in (".csv", ".svg"):
        a = (tmp_path / "a" / (name + suffix)).read_bytes()
        assert a == (tmp_path / "b" / (name + suffix)).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["version"] == __version__ and man["seeds"] == [0, 1]
    assert parse_config(json.dumps(man["config"])) == parse_config(TINY_RUN)
    assert "slope=" in capsys.readouterr().out


def test_run_moment_audit(tmp_path):
    cfg = tmp_path / "m.yaml"
    cfg.write_text("scenario: example1\nstudy: moment_audit\np_values: [4]\n"
                   "dt_ladder: [2^-5, 2^-4]\nn_particles: 8\nrepetitions: 2\n")
    assert main(["run", str(cfg), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "moment_audit_example1_d1.csv").read_text().splitlines()
    assert lines[0].startswith("study,p,abscissa,moment_mean")
    assert lines[-1] == "all_finite,true"


def test_validate_and_scenarios(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(MINIMAL)
    assert main(["validate", str(cfg)]) == 0
    echoed = capsys.readouterr().out
    assert parse_config(echoed) == parse_config(MINIMAL)
    assert main(["scenarios"]) == 0
    out = capsys.readouterr().out
    assert all(f"example{k}" in out for k in range(1, 5))


def test_exit_codes(tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL.replace("proxy_count: 64", "proxy_count: 8"))
    assert main(["validate", str(bad)]) == EXIT_CONFIG
    assert "proxy_count" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG

    import chaoskit.cli as cli
    from chaoskit.errors import DivergenceError

    def boom(config):
        raise DivergenceError("non-finite value", particle=0, step=3, context={"seed": 1})

    monkeypatch.setattr(cli, "run_study", boom)
    good = tmp_path / "good.yaml"
    good.write_text(TINY_RUN)
    assert main(["run", str(good), "--out", str(tmp_path)]) == EXIT_DIVERGENCE
    assert "seed=1" in capsys.readouterr().err
