import json
from pathlib import Path

import pytest

from envelope_em.cli import build_parser, main, read_config_file, resolve_config
from envelope_em.errors import InvalidConfig
from envelope_em.services.report_service import SCHEMA

SAMPLE_ARGS = ["--scenario", "custom", "--n", "150", "--r", "4", "--p", "2", "--u", "1",
               "--omega-scale", "0.5", "--omega0-scale", "50", "--seed", "5"]
COLUMNS = ["--predictors", "x1,x2", "--responses", "y1,y2,y3,y4"]
SHIPPED_CONFIG = str(Path(__file__).resolve().parent.parent / "config.ini")


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "sample.csv"
    assert main(["sample", *SAMPLE_ARGS, "--output", str(path)]) == 0
    return path


def _fit(tmp_path, data_file, name, *extra):
    out = tmp_path / name
    code = main(["fit", "--data", str(data_file), *COLUMNS, "--seed", "9", "--max-iter", "200",
                 "--output", str(out), *extra])
    return code, out


def test_sample_writes_a_table(data_file):
    lines = data_file.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "x1,x2,y1,y2,y3,y4"
    assert len(lines) == 151
    assert any("NA" in line for line in lines[1:])


def test_fit_full_dimension_is_labelled_standard(tmp_path, data_file):
    code, out = _fit(tmp_path, data_file, "fit.json", "--u", "4")
    assert code == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["schema"] == SCHEMA
    assert document["command"] == "fit"
    assert document["seed"] == 9
    assert document["fit"]["label"] == "standard MLE (u=r=4)"
    assert document["fit"]["beta"]["shape"] == [4, 2]
    assert "selection" not in document


def test_fit_auto_selects_dimension(tmp_path, data_file):
    code, out = _fit(tmp_path, data_file, "auto.json", "--u", "auto")
    assert code == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["selection"]["method"] == "bicq"
    assert document["fit"]["u"] == document["selection"]["chosen_u"]
    assert document["config"]["u"] == "auto"


def test_same_seed_gives_identical_bytes(tmp_path, data_file):
    _, first = _fit(tmp_path, data_file, "a.json", "--u", "2", "--inference", "--bootstrap-reps", "3")
    _, second = _fit(tmp_path, data_file, "b.json", "--u", "2", "--inference", "--bootstrap-reps", "3")
    assert first.read_bytes() == second.read_bytes()


def test_thread_count_does_not_change_results(tmp_path, data_file):
    _, serial = _fit(tmp_path, data_file, "t1.json", "--threads", "1")
    _, threaded = _fit(tmp_path, data_file, "t2.json", "--threads", "2")
    assert json.loads(serial.read_text())["fit"] == json.loads(threaded.read_text())["fit"]


def test_table_format(tmp_path, data_file):
    code, out = _fit(tmp_path, data_file, "fit.tsv", "--u", "1", "--format", "table")
    assert code == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# em-envelope envelope (u=1)")
    assert lines[1].split("\t") == ["response", "predictor", "estimate"]
    assert len(lines) == 2 + 8


def test_select_writes_to_stdout(data_file, capsys):
    assert main(["select", "--data", str(data_file), *COLUMNS, "--seed", "1", "--max-iter", "100"]) == 0
    document = json.loads(capsys.readouterr().out)
    assert document["command"] == "select"
    assert len(document["selection"]["criterion"]) == 5


def test_missing_file_exits_with_data_status(tmp_path, capsys):
    code = main(["fit", "--data", str(tmp_path / "absent.csv"), *COLUMNS, "--u", "1"])
    assert code == 3
    assert "error[DataFileNotFound]" in capsys.readouterr().err


def test_missing_column_exits_with_data_status(data_file, capsys):
    code = main(["fit", "--data", str(data_file), "--predictors", "x1", "--responses", "y1,y9", "--u", "1"])
    assert code == 3
    assert "error[MissingColumn]" in capsys.readouterr().err


def test_dimension_above_r_is_a_config_error(data_file):
    assert main(["fit", "--data", str(data_file), *COLUMNS, "--u", "5"]) == 2


def test_unknown_config_key(tmp_path, data_file):
    config = tmp_path / "run.ini"
    config.write_text("[run]\nspeed = fast\n", encoding="utf-8")
    assert main(["fit", "--data", str(data_file), *COLUMNS, "--config", str(config)]) == 2


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[run]\nu = 2\ntol = 1e-4\nselect = bootstrap\n", encoding="utf-8")
    args = build_parser().parse_args(["fit", "--config", str(config), "--u", "3", "--seed", "4"])
    cfg = resolve_config(args)
    assert cfg.u == 3
    assert cfg.tol == 1e-4
    assert cfg.select == "bootstrap"
    assert not cfg.seed_drawn


def test_missing_seed_is_drawn():
    cfg = resolve_config(build_parser().parse_args(["fit"]))
    assert cfg.seed_drawn
    assert cfg.seed >= 0


def test_read_config_file_errors(tmp_path):
    with pytest.raises(InvalidConfig):
        read_config_file(str(tmp_path / "nope.ini"), "fit")
    config = tmp_path / "bad.ini"
    config.write_text("[run]\nmax_iter = many\n", encoding="utf-8")
    with pytest.raises(InvalidConfig):
        read_config_file(str(config), "fit")


def test_threshold_must_be_a_probability():
    with pytest.raises(InvalidConfig):
        resolve_config(build_parser().parse_args(["select", "--threshold", "1.5", "--seed", "1"]))


def test_bernoulli_model_needs_one_predictor(data_file):
    assert main(["fit", "--data", str(data_file), *COLUMNS, "--u", "1", "--predictor-model", "bernoulli"]) == 2


def test_sample_needs_output():
    assert main(["sample", *SAMPLE_ARGS]) == 2


def test_simulate_small_scenario(capsys):
    code = main(["simulate", *SAMPLE_ARGS, "--reps", "2", "--selection", "fixed", "--format", "table"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# scenario=custom; reps=2; seed=5"
    assert len(lines) == 2 + 6


def test_fit_with_shipped_config(tmp_path, data_file):
    code, out = _fit(tmp_path, data_file, "fit.json", "--config", SHIPPED_CONFIG)
    assert code == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["config"]["select"] == "bicq"
    assert document["config"]["inference"] is False
    assert "selection" in document


def test_select_with_shipped_config(data_file, capsys):
    code = main(["select", "--data", str(data_file), *COLUMNS, "--seed", "1", "--max-iter", "100",
                 "--config", SHIPPED_CONFIG])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["selection"]["method"] == "bicq"


def test_simulate_with_shipped_config(capsys):
    code = main(["simulate", *SAMPLE_ARGS, "--reps", "2", "--format", "table", "--config", SHIPPED_CONFIG])
    assert code == 0
    assert capsys.readouterr().out.startswith("# scenario=custom; reps=2; seed=5")


def test_sample_with_shipped_config(tmp_path):
    path = tmp_path / "configured.csv"
    assert main(["sample", *SAMPLE_ARGS, "--output", str(path), "--config", SHIPPED_CONFIG]) == 0
    assert path.read_text(encoding="utf-8").splitlines()[0] == "x1,x2,y1,y2,y3,y4"


def test_run_section_keys_other_commands_define_are_skipped(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[run]\nthreshold = 0.9\nreps = 7\ntol = 1e-5\n", encoding="utf-8")
    assert read_config_file(str(config), "sample") == {}
    assert read_config_file(str(config), "select") == {"threshold": 0.9, "tol": 1e-5}
    assert read_config_file(str(config), "simulate") == {"reps": 7, "tol": 1e-5}


def test_command_section_overrides_run_and_is_strict(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[run]\ntol = 1e-5\n\n[fit]\ntol = 1e-7\n", encoding="utf-8")
    assert read_config_file(str(config), "fit") == {"tol": 1e-7}
    assert read_config_file(str(config), "select") == {"tol": 1e-5}
    config.write_text("[select]\ninference = true\n", encoding="utf-8")
    with pytest.raises(InvalidConfig):
        read_config_file(str(config), "select")


def test_simulate_report_written_next_to_table(tmp_path):
    table = tmp_path / "summary.tsv"
    report = tmp_path / "summary.json"
    code = main(["simulate", *SAMPLE_ARGS, "--reps", "2", "--selection", "fixed", "--format", "table",
                 "--output", str(table), "--report", str(report)])
    assert code == 0
    assert table.read_text(encoding="utf-8").startswith("# scenario=custom")
    document = json.loads(report.read_text(encoding="utf-8"))
    assert document["command"] == "simulate"
    assert document["seed"] == 5


def test_empty_data_file_exits_with_data_status(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    assert main(["fit", "--data", str(empty), *COLUMNS, "--u", "1"]) == 3
    assert "error[EmptyTable]" in capsys.readouterr().err


def test_inference_reports_asymptotic_and_bootstrap_se(tmp_path, data_file):
    code, out = _fit(tmp_path, data_file, "inference.json", "--u", "1", "--inference", "--bootstrap-reps", "40")
    assert code == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["bootstrap"]["se"]["shape"] == [4, 2]
    assert document["asymptotic"]["available"]
    assert document["asymptotic"]["se"]["shape"] == [4, 2]
