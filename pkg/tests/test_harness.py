import json
import warnings

import pytest

from patchlab import cli
from patchlab.errors import ComparisonError, ConfigError
from patchlab.harness import RunConfig, compare, csv_text, load_records, run, verify

SMALL = {"name": "t",
         "dataset": {"n": 800, "n_test": 100, "input_dim": 6},
         "model": {"hidden": [8]},
         "optimizer": {"epochs": 2},
         "seeds": [0],
         "report": {"mi_estimate": False}}


def config(**kw):
    doc = json.loads(json.dumps(SMALL))
    for key, value in kw.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key].update(value)
        else:
            doc[key] = value
    return doc


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict(config(colour="red"))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(config(method="SVM"))
    with pytest.raises(ConfigError, match="translator"):
        RunConfig.from_dict(config(method="CAMEL"))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(config(seeds=[]))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(config(dataset={"kind": "mnist"}, translators="analytic", method="CAMEL"))


def test_erm_with_lambda_warns():
    with pytest.warns(UserWarning, match="lambda_target"):
        cfg = RunConfig.from_dict(config(method_params={"lambda_target": 5.0}))
    assert cfg.train_config(0).lam == 0.0


def test_config_hash_and_run_id_stable():
    a, b = RunConfig.from_dict(config()), RunConfig.from_dict(config())
    assert a.hash == b.hash and a.run_id.startswith("t-ERM-")
    assert RunConfig.from_dict(config(seeds=[1])).hash != a.hash


def test_csv_is_deterministic(tmp_path):
    doc = config(method="GDRO")
    first = csv_text(run(doc, tmp_path / "a"))
    second = csv_text(run(doc, tmp_path / "b"))
    assert first == second
    header = first.splitlines()[0].split(",")
    assert header[:7] == ["run_id", "method", "seed", "epoch", "split", "agg_acc", "robust_acc"]
    assert header[-3:] == ["mi_estimate", "lambda_current", "wall_ms"]
    assert (tmp_path / "a" / f"{RunConfig.from_dict(doc).run_id}.csv").read_text() == first
    assert "test_selected" in first


def test_camel_lambda_zero_matches_sgdro():
    camel = run(config(method="CAMEL", translators="analytic", method_params={"lambda_target": 0.0}))
    sgdro = run(config(method="SGDRO"))
    assert camel[0].selected == sgdro[0].selected
    assert camel[0].best_epoch == sgdro[0].best_epoch


def test_cdat_zero_matches_erm():
    cdat = run(config(method="CDAT", method_params={"domain_coef": 0.0}))
    erm = run(config(method="ERM"))
    assert cdat[0].selected == erm[0].selected


def test_bound_report_in_record():
    rec = run(config(method="CAMEL", translators="analytic", method_params={"lambda_target": 1.0},
                     report={"bound": True}))[0]
    assert rec.bound["slack"] >= -1e-9


def test_compare_tables(tmp_path):
    run(config(method="ERM", seeds=[0, 1]), tmp_path)
    run(config(method="GDRO", seeds=[0, 1]), tmp_path)
    table = compare(tmp_path)
    assert {r["method"] for r in table.rows} == {"ERM", "GDRO"}
    assert "*" in table.render()
    single = compare([r for r in load_records(tmp_path) if r.method == "ERM"][:1])
    assert len(single.rows) == 1 and single.rows[0]["robust"].endswith("(0.00)")
    rec = load_records(tmp_path)[0]
    twin = compare([rec, rec])
    assert twin.rows[0]["robust"].endswith("(0.00)")


def test_compare_mismatched_datasets(tmp_path):
    run(config(), tmp_path)
    run(config(dataset={"rho": 0.5}), tmp_path)
    with pytest.raises(ComparisonError):
        compare(tmp_path)


def test_verify_unknown_suite():
    with pytest.raises(ConfigError):
        verify("nope")


def test_verify_divergences_suite():
    report = verify("divergences", trials=200)
    assert report.passed and report.counts[0] >= 6


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(config(method_params={"lambda_target": 3.0})))
    assert cli.main(["run", "--config", str(good), "--out", str(tmp_path / "runs")]) == 0
    assert "ignores" in capsys.readouterr().err
    assert cli.main(["compare", "--runs", str(tmp_path / "runs")]) == 0
    assert "ERM" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(config(colour=1)))
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert cli.main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert cli.main(["verify", "--suite", "nope"]) == 1
    assert cli.main(["verify", "--suite", "divergences", "--trials", "50"]) == 0
    assert cli.main(["compare", "--runs", str(tmp_path / "empty")]) == 1


def test_cli_divergence_exit_code(tmp_path):
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps(config(optimizer={"lr": 1e300})))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 3
