"""End-to-end CLI runs: artifacts, manifests, exit codes, reruns."""

import pytest

from htnrisk.artifacts import read_json, sha256_file
from htnrisk.cli import main
from htnrisk.cohort import cohort_from_dict

# Small LSTM so the pipeline fixture stays fast.
LSTM_KV = "hidden_size=8\nlearning_rate=0.05\nmax_epochs=2\n"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full six-stage run shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("pipeline")
    paths = {name: root / name for name in (
        "data", "cohort", "features", "lr", "lstm", "evaluate", "attr_lr", "attr_lstm",
    )}
    paths["root"] = root
    lstm_config = root / "lstm.kv"
    lstm_config.write_text(LSTM_KV, encoding="utf-8")
    samples = str(paths["cohort"] / "samples.json")
    schema = str(paths["features"] / "schema.json")
    stages = [
        ["generate", "--out", str(paths["data"]), "--seed", "11", "--patients", "150"],
        ["cohort", "--data", str(paths["data"]), "--out", str(paths["cohort"]), "--seed", "0"],
        ["featurize", "--samples", samples, "--out", str(paths["features"]), "--export-csv"],
        ["train", "--model", "lr", "--samples", samples, "--schema", schema,
         "--epochs", "3", "--seed", "0", "--out", str(paths["lr"])],
        ["train", "--model", "lstm", "--samples", samples, "--schema", schema,
         "--config", str(lstm_config), "--seed", "0", "--out", str(paths["lstm"])],
        ["evaluate", "--model", str(paths["lr"] / "model.json"), "--samples", samples,
         "--out", str(paths["evaluate"])],
        ["attribute", "--model", str(paths["lr"] / "model.json"),
         "--out", str(paths["attr_lr"])],
        ["attribute", "--model", str(paths["lstm"] / "model.json"), "--samples", samples,
         "--steps", "16", "--top", "5", "--out", str(paths["attr_lstm"])],
    ]
    for argv in stages:
        assert main(argv) == 0, f"stage {argv[0]} failed"
    return paths


def _lines(path):
    return path.read_text(encoding="utf-8").splitlines()


# -- per-stage artifacts ------------------------------------------------------


def test_generate_writes_tables_and_hashed_manifest(pipeline):
    data = pipeline["data"]
    manifest = read_json(data / "manifest.json")
    assert manifest["stage"] == "generate"
    assert manifest["seed"] == 11
    assert manifest["inputs"] == {}
    assert manifest["config"]["n_patients"] == 150
    for kind in ("encounters", "medications", "labs", "diagnoses"):
        path = data / f"{kind}.csv"
        assert path.exists()
        assert manifest["outputs"][kind]["sha256"] == sha256_file(path)


def test_cohort_stage_artifacts(pipeline):
    out = pipeline["cohort"]
    manifest = read_json(out / "manifest.json")
    assert manifest["stage"] == "cohort"
    for kind in ("encounters", "medications", "labs", "diagnoses"):
        source = pipeline["data"] / f"{kind}.csv"
        assert manifest["inputs"][kind]["sha256"] == sha256_file(source)
    assert manifest["config"]["row_errors"] == 0
    assert manifest["config"]["horizon_days"] == 90

    cohort = cohort_from_dict(read_json(out / "samples.json"))
    assert cohort.total_patients == 150
    assert cohort.samples
    assert {cohort.splits[s.patient] for s in cohort.samples} == {
        "train", "validation", "test",
    }
    assert _lines(out / "exclusions.csv")[0] == "rule,excluded_count,remaining_count"
    assert _lines(out / "row_errors.csv")  # header row even when clean


def test_featurize_stage_artifacts(pipeline):
    out = pipeline["features"]
    manifest = read_json(out / "manifest.json")
    config = manifest["config"]
    assert config["n_train_samples"] > 0
    assert config["n_columns"] > 0
    assert config["n_lr_columns"] > config["n_columns"]  # lag block widens it
    assert len(config["schema_hash"]) == 64
    for name in ("schema", "sequence_features", "lr_features"):
        path = out / manifest["outputs"][name]["path"].split("/")[-1]
        assert path.exists()
        assert manifest["outputs"][name]["sha256"] == sha256_file(path)


def test_train_stage_artifacts(pipeline):
    out = pipeline["lr"]
    manifest = read_json(out / "manifest.json")
    model = read_json(out / "model.json")
    assert model["format"] == "htnrisk-model/1"
    assert model["kind"] == "lr"
    assert model["training"]["config"]["max_epochs"] == 3
    log_lines = _lines(out / "train_log.csv")
    assert log_lines[0] == "epoch,train_loss,val_loss,seconds"
    assert len(log_lines) - 1 == model["training"]["epochs_run"]
    # timing log is recorded by path only: identical reruns differ there
    assert "train_log" in manifest["unhashed_outputs"]
    assert "train_log" not in manifest["outputs"]


def test_train_lstm_uses_config_file(pipeline):
    model = read_json(pipeline["lstm"] / "model.json")
    assert model["kind"] == "lstm"
    assert model["shapes"]["hidden"] == 8
    assert model["training"]["config"]["hidden_size"] == 8
    assert model["training"]["stop_reason"] in ("early_stop", "max_epochs")


def test_evaluate_stage_artifacts(pipeline):
    out = pipeline["evaluate"]
    report = read_json(out / "report.json")
    assert report["model_kind"] == "lr"
    assert report["split"] == "test"
    for section in ("model", "baseline"):
        assert 0.0 <= report[section]["auroc"] <= 1.0
    roc = _lines(out / "roc_model.csv")
    assert roc[0] == "threshold,fpr,tpr"
    assert roc[1] == "inf,0,0"
    assert (out / "roc_baseline.csv").exists()


def test_attribute_lr_ranks_weights(pipeline):
    lines = _lines(pipeline["attr_lr"] / "lr_weights.csv")
    assert lines[0] == "feature,weight,rank"
    assert len(lines) - 1 == 20  # default --top
    assert lines[1].endswith(",1")


def test_attribute_lstm_writes_per_step_and_aggregate(pipeline):
    out = pipeline["attr_lstm"]
    per_step = _lines(out / "attributions.csv")
    assert per_step[0] == "feature,timestep,score"
    agg = _lines(out / "attributions_agg.csv")
    assert agg[0] == "feature,total_score,rank"
    assert len(agg) - 1 == 5  # --top 5
    manifest = read_json(out / "manifest.json")
    assert manifest["config"]["steps"] == 16


# -- reruns -------------------------------------------------------------------


def test_rerun_reproduces_artifacts_byte_for_byte(pipeline, tmp_path):
    again = tmp_path / "data2"
    assert main(["generate", "--out", str(again), "--seed", "11", "--patients", "150"]) == 0
    for kind in ("encounters", "medications", "labs", "diagnoses"):
        assert (again / f"{kind}.csv").read_bytes() == (
            pipeline["data"] / f"{kind}.csv"
        ).read_bytes()

    retrain = tmp_path / "lr2"
    samples = str(pipeline["cohort"] / "samples.json")
    schema = str(pipeline["features"] / "schema.json")
    assert main(["train", "--model", "lr", "--samples", samples, "--schema", schema,
                 "--epochs", "3", "--seed", "0", "--out", str(retrain)]) == 0
    assert (retrain / "model.json").read_bytes() == (
        pipeline["lr"] / "model.json"
    ).read_bytes()

    reeval = tmp_path / "eval2"
    assert main(["evaluate", "--model", str(pipeline["lr"] / "model.json"),
                 "--samples", samples, "--out", str(reeval)]) == 0
    assert (reeval / "report.json").read_bytes() == (
        pipeline["evaluate"] / "report.json"
    ).read_bytes()


def test_different_seed_changes_the_model(pipeline, tmp_path):
    out = tmp_path / "lr_seed1"
    samples = str(pipeline["cohort"] / "samples.json")
    schema = str(pipeline["features"] / "schema.json")
    assert main(["train", "--model", "lr", "--samples", samples, "--schema", schema,
                 "--epochs", "3", "--seed", "1", "--out", str(out)]) == 0
    assert (out / "model.json").read_bytes() != (
        pipeline["lr"] / "model.json"
    ).read_bytes()


# -- exit codes and error reporting -------------------------------------------


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "error: usage:" in capsys.readouterr().err


def test_missing_required_flag_is_a_usage_error(capsys):
    assert main(["generate"]) == 1
    assert "error: usage:" in capsys.readouterr().err


def test_bad_model_choice_is_a_usage_error(capsys):
    assert main(["train", "--model", "xgb", "--samples", "s", "--schema", "c",
                 "--out", "o"]) == 1
    assert "error: usage:" in capsys.readouterr().err


def test_nonpositive_patient_count_is_a_data_error(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "d"), "--patients", "0"]) == 2
    assert "error: generate: empty cohort" in capsys.readouterr().err


def test_missing_source_table_is_a_data_error(tmp_path, capsys):
    assert main(["cohort", "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: cohort: ")


def test_malformed_fractions_are_a_usage_error(pipeline, tmp_path, capsys):
    assert main(["cohort", "--data", str(pipeline["data"]),
                 "--out", str(tmp_path / "out"), "--fractions", "0.5,0.5"]) == 1
    assert "error: cohort: expected 3 comma-separated fractions" in capsys.readouterr().err


def test_missing_samples_file_is_a_data_error(tmp_path, capsys):
    assert main(["featurize", "--samples", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "out")]) == 2
    assert capsys.readouterr().err.startswith("error: featurize: ")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exploding_training_is_a_numerical_error(pipeline, tmp_path, capsys):
    config = tmp_path / "boom.kv"
    config.write_text("learning_rate=1e308\nmax_epochs=6\nl1_lambda=0.0\n", encoding="utf-8")
    assert main(["train", "--model", "lr",
                 "--samples", str(pipeline["cohort"] / "samples.json"),
                 "--schema", str(pipeline["features"] / "schema.json"),
                 "--config", str(config), "--out", str(tmp_path / "out")]) == 3
    assert capsys.readouterr().err.startswith("error: train: ")


def test_divergence_still_writes_the_partial_log(pipeline, tmp_path, monkeypatch, capsys):
    import htnrisk.train as train

    log = train.TrainLog([train.EpochStat(1, 0.7, float("nan"), 0.01)], "diverged")

    def explode(config, train_data, val_data):
        raise train.TrainingDiverged("validation loss is not finite", log)

    monkeypatch.setattr(train, "train_model", explode)
    out = tmp_path / "out"
    assert main(["train", "--model", "lr",
                 "--samples", str(pipeline["cohort"] / "samples.json"),
                 "--schema", str(pipeline["features"] / "schema.json"),
                 "--out", str(out)]) == 3
    assert "error: train: validation loss is not finite" in capsys.readouterr().err
    lines = _lines(out / "train_log.csv")
    assert lines[0] == "epoch,train_loss,val_loss,seconds"
    assert lines[1].startswith("1,0.7,nan,")
    assert not (out / "model.json").exists()


def test_empty_evaluation_split_is_a_data_error(pipeline, tmp_path, capsys):
    # 3 patients all land in the training split, so test is empty.
    data = tmp_path / "tiny"
    coh = tmp_path / "tinycoh"
    assert main(["generate", "--out", str(data), "--seed", "5", "--patients", "3"]) == 0
    assert main(["cohort", "--data", str(data), "--out", str(coh)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--model", str(pipeline["lr"] / "model.json"),
                 "--samples", str(coh / "samples.json"), "--split", "test",
                 "--out", str(tmp_path / "ev")]) == 2
    assert "error: evaluate: no evaluation samples in split 'test'" in capsys.readouterr().err


def test_lstm_attribution_without_samples_is_a_usage_error(pipeline, tmp_path, capsys):
    assert main(["attribute", "--model", str(pipeline["lstm"] / "model.json"),
                 "--out", str(tmp_path / "out")]) == 1
    assert "error: attribute: --samples is required" in capsys.readouterr().err


def test_nonpositive_top_is_a_usage_error(pipeline, tmp_path, capsys):
    assert main(["attribute", "--model", str(pipeline["lr"] / "model.json"),
                 "--top", "0", "--out", str(tmp_path / "out")]) == 1
    assert "error: attribute: --top must be positive" in capsys.readouterr().err


def test_stage_summary_goes_to_stdout(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "d"), "--seed", "1",
                 "--patients", "2"]) == 0
    captured = capsys.readouterr()
    assert captured.out.startswith("generate: wrote ")
    assert captured.err == ""
