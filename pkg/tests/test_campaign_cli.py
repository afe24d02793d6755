import json

import numpy as np
import pytest

from hsps import cli
from hsps.campaign import Campaign, analyze_point, analyze_runs, import_timetags, run_campaign, run_seed, RunSummary
from hsps.errors import ConfigurationError, TimetagParseError, TimetagValidationError
from hsps.instrument import PEAK_OUT, TAGS_HEADER, reference_config, run_experiment

BASE = reference_config(background_rate_hz=280_000.0, n_triggers=20_000, seed=3)

QUICK_YAML = """
experiment:
  background_rate_hz: 280000.0
  n_triggers: 20000
  seed: 5
campaign:
  sweep_ns: [60, 30, 15]
"""


@pytest.fixture
def quick_config(tmp_path):
    p = tmp_path / "quick.yaml"
    p.write_text(QUICK_YAML)
    return p


# --------------------------------------------------------------------------- campaign


def test_single_point_skips_fit(tmp_path):
    res = run_campaign(Campaign(BASE, (60,), tmp_path / "one"))
    assert len(res["points"]) == 1
    assert "insufficient points" in res["fit"]["note"]
    assert json.loads((tmp_path / "one" / "fit.json").read_text()) == res["fit"]


def test_campaign_writes_all_artifacts(tmp_path):
    out = tmp_path / "c"
    res = run_campaign(Campaign(BASE, (60, 30, 15), out))
    names = sorted(p.name for p in out.iterdir())
    assert "manifest.json" in names and "results.json" in names and "fit.json" in names
    assert sum(n.startswith("point_") for n in names) == 3
    assert sum(n.startswith("hist_") and "peakout" not in n for n in names) == 3
    assert set(res["fit"]) == {"onf", "alpha"}
    header = (out / names[[n.startswith("hist_") for n in names].index(True)]).read_text().splitlines()[0]
    assert header == "bin_start_ps,det1_counts,det2_counts"
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["seeds"]["dt60ns"]) == {"unblocked", "block1", "block2", "block12", "peakout"}


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_campaign(Campaign(BASE, (60, 15, 5), a, workers=1))
    assert cli.main(["sweep", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("results.json", "fit.json", "manifest.json", "hist_dt5ns.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_workers_do_not_change_results(tmp_path):
    r1 = run_campaign(Campaign(BASE, (60, 5), workers=1))
    r2 = run_campaign(Campaign(BASE, (60, 5), workers=2))
    assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)


def test_run_seeds_are_distinct_and_positional():
    seeds = {run_seed(7, p, r, k) for p in range(4) for r in ("unblocked", "block1", "block2", "block12", "peakout") for k in range(3)}
    assert len(seeds) == 60
    assert run_seed(7, 1, "block2", 0) == run_seed(7, 1, "block2", 0)


@pytest.mark.parametrize("sweep", [(), (-5,), (5.0001,)])
def test_campaign_validation(sweep):
    with pytest.raises(ConfigurationError):
        Campaign(BASE, sweep)


def test_unwritable_output(tmp_path, quick_config):
    blocker = tmp_path / "file"
    blocker.write_text("")
    rc = cli.main(["run", "--config", str(quick_config), "--out", str(blocker / "sub")])
    assert rc != 0


def test_pooling_equals_one_long_histogram():
    a = run_experiment(BASE)
    b = run_experiment(BASE.replace(seed=4))
    pooled = RunSummary.of(a, 100).pool(RunSummary.of(b, 100))
    assert pooled.hist.counts.sum() == int(a.fired.sum() + b.fired.sum())
    assert pooled.seeds == [3, 4]


# --------------------------------------------------------------------------- timetags


def test_empty_tag_file(tmp_path):
    rec = run_experiment(BASE.replace(n_triggers=5))
    rec.write(tmp_path / "t")
    (tmp_path / "t.csv").write_text(",".join(TAGS_HEADER) + "\n")
    back = import_timetags(tmp_path / "t.csv")
    assert len(back) == 0 and back.det_time.shape == (2, 0)


def test_export_import_round_trip(tmp_path):
    runs = [run_experiment(BASE.replace(blocked=b, seed=k)) for k, b in enumerate([set(), {1}, {2}, {1, 2}])]
    runs.append(run_experiment(BASE.replace(mode=PEAK_OUT, seed=9)))
    back = []
    for k, r in enumerate(runs):
        r.write(tmp_path / f"run{k}")
        back.append(import_timetags(tmp_path / f"run{k}.csv"))
    for r, b in zip(runs, back):
        for f in ("triggers_ps", "det_time", "det_origin", "armed"):
            assert np.array_equal(getattr(r, f), getattr(b, f))
    assert json.dumps(analyze_runs(runs)) == json.dumps(analyze_runs(back))


def test_out_of_gate_time_is_rejected_with_line(tmp_path):
    rec = run_experiment(BASE.replace(n_triggers=5))
    rec.write(tmp_path / "t")
    rows = [",".join(TAGS_HEADER), "1000,1,5000,Background,peak-in", "2000,2,150000,Background,peak-in"]
    (tmp_path / "t.csv").write_text("\n".join(rows) + "\n")
    with pytest.raises(TimetagValidationError) as e:
        import_timetags(tmp_path / "t.csv")
    assert e.value.line == 3 and "150000" in str(e.value)


@pytest.mark.parametrize(
    "row,err",
    [
        ("abc,1,5,Background,peak-in", TimetagParseError),
        ("1000,3,5,Background,peak-in", TimetagParseError),
        ("1000,1,5,Cosmic,peak-in", TimetagParseError),
        ("1000,1,5,Background", TimetagParseError),
        ("1000,1,5,Background,peak-out", TimetagValidationError),
    ],
)
def test_malformed_rows(tmp_path, row, err):
    rec = run_experiment(BASE.replace(n_triggers=5))
    rec.write(tmp_path / "t")
    (tmp_path / "t.csv").write_text(",".join(TAGS_HEADER) + "\n2000,,,,peak-in\n" + row + "\n")
    with pytest.raises(err) as e:
        import_timetags(tmp_path / "t.csv")
    assert e.value.line == 3


def test_unsorted_triggers_rejected(tmp_path):
    rec = run_experiment(BASE.replace(n_triggers=5))
    rec.write(tmp_path / "t")
    (tmp_path / "t.csv").write_text(",".join(TAGS_HEADER) + "\n2000,,,,peak-in\n1000,,,,peak-in\n")
    with pytest.raises(TimetagValidationError):
        import_timetags(tmp_path / "t.csv")


# --------------------------------------------------------------------------- cli


def test_cli_sweep_and_predict(tmp_path, quick_config, capsys):
    assert cli.main(["sweep", "--config", str(quick_config), "--dt", "60,30,15,5", "--out", str(tmp_path / "s")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert [p["delta_t_switch_ns"] for p in res["points"]] == [60, 30, 15, 5]
    assert cli.main(["predict", "--config", str(quick_config)]) == 0
    pred = json.loads(capsys.readouterr().out)
    assert len(pred["points"]) == 3 and pred["points"][0]["onf"] > pred["points"][2]["onf"]


def test_cli_run_uses_seed(tmp_path, quick_config, capsys):
    assert cli.main(["run", "--config", str(quick_config), "--out", str(tmp_path / "r1"), "--seed", "1"]) == 0
    a = capsys.readouterr().out
    assert cli.main(["run", "--config", str(quick_config), "--out", str(tmp_path / "r2"), "--seed", "2"]) == 0
    b = capsys.readouterr().out
    assert json.loads(a)["points"][0]["n_triggers"] == 20_000
    assert a != b
    assert json.loads((tmp_path / "r1" / "manifest.json").read_text())["experiment"]["seed"] == 1


def test_cli_analyze(tmp_path, capsys):
    stems = []
    for k, b in enumerate([set(), {1}, {2}, {1, 2}]):
        stem = tmp_path / f"run{k}"
        run_experiment(BASE.replace(blocked=b, seed=k)).write(stem)
        stems.append(str(stem) + ".csv")
    assert cli.main(["analyze", "--tags", *stems, "--out", str(tmp_path / "an")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["points"][0]["alpha"] is not None and res["points"][0]["r"] is None
    assert (tmp_path / "an" / "results.json").exists()


def test_cli_config_error_is_json(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment:\n  n_triggers: 10\n  switch:\n    extinction: 2\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "configuration" and "experiment.switch.extinction" in err["message"]


def test_cli_unknown_field_and_missing_file(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment:\n  n_triggers: 10\n  pair_rate: 5\n")
    assert cli.main(["predict", "--config", str(bad)]) != 0
    assert "pair_rate" in json.loads(capsys.readouterr().err)["message"]
    assert cli.main(["predict", "--config", str(tmp_path / "nope.yaml")]) != 0
    assert json.loads(capsys.readouterr().err)["error"] == "io"


def test_cli_parse_error_names_line(tmp_path, capsys):
    rec = run_experiment(BASE.replace(n_triggers=5))
    rec.write(tmp_path / "t")
    (tmp_path / "t.csv").write_text(",".join(TAGS_HEADER) + "\nx,1,2,Background,peak-in\n")
    assert cli.main(["analyze", "--tags", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")]) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "parse" and "line 2" in err["message"]


def test_calibration_block(tmp_path):
    from hsps.campaign import load_campaign

    p = tmp_path / "c.yaml"
    p.write_text("experiment:\n  n_triggers: 10\ncalibration:\n  target_onf: 0.115\n  at_delta_t_ns: 60\n")
    c = load_campaign(p)
    assert c.base.background_rate_hz == pytest.approx(280_014, rel=1e-3)
    assert c.calibration["background_rate_hz"] == c.base.background_rate_hz


def test_analyze_point_requires_unblocked_run():
    from hsps.errors import InsufficientDataError

    with pytest.raises(InsufficientDataError):
        analyze_point({})
