import json
import os

import numpy as np
import pytest

from ted import cli
from ted.dataset import (
    SpaceDescriptor,
    SplitSpec,
    cartesian_decode,
    load_csv_triples,
    schema_path_for,
    split_indices,
    standardize,
)
from ted.experiments import (
    METHODS,
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    RunRecord,
    evaluate_artifacts,
    generate_synthetic_triples,
    generate_ttt,
    load_artifact,
    load_source,
    net_predictions,
    prepare,
    report,
    run_experiment,
)
from ted.models import TrainConfig, forward
from ted.pairloss import PairLossConfig

SMALL_SYNTH = {"kind": "synthetic", "n": 240, "n_features": 6, "e_dim": 3, "seed": 2}
SMALL_PAIRS = PairLossConfig(c1=0.2, c2=0.5, c3=0.5, c4=1.0, w=0.5, pair_count=2000)
FAST = TrainConfig(epochs=5, batch_size=32, learning_rate=0.01)


def small_cfg(method, **kw):
    base = dict(
        method=method,
        source=SMALL_SYNTH,
        transforms={"standardize": True},
        hidden=(16,),
        train=FAST,
        pair_train=TrainConfig(epochs=2, batch_size=64, learning_rate=0.01),
        pairloss=SMALL_PAIRS,
        knn_k=(1, 5),
        lambdas=(0.5, 2.0),
        alphas=(0.01, 0.1),
        seed=3,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def small_ttt_cfg(method, **kw):
    return ExperimentConfig(method=method, hidden=(16,), train=TrainConfig(epochs=2, batch_size=128, learning_rate=0.1), **kw)


def _ols_r2(E, Y):
    A = np.column_stack([E, np.ones(len(E))])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - A @ coef
    return 1 - resid @ resid / ((Y - Y.mean()) @ (Y - Y.mean())), resid


# ------------------------------------------------------------------ synthetic


def test_synthetic_label_is_linear_in_explanations():
    ds = generate_synthetic_triples(n=1000, noise=0.05, seed=0)
    r2, _ = _ols_r2(ds.explanations, ds.labels)
    assert r2 > 0.9
    exact = generate_synthetic_triples(n=300, noise=0.0, seed=4)
    _, resid = _ols_r2(exact.explanations, exact.labels)
    assert np.abs(resid).max() < 1e-12
    assert ds.e_space == SpaceDescriptor.vector(5, [f"e{i}" for i in range(5)])


def test_synthetic_determinism_and_errors():
    a, b = generate_synthetic_triples(seed=9), generate_synthetic_triples(seed=9)
    for f in ("features", "labels", "explanations"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.features, generate_synthetic_triples(seed=10).features)
    for bad in (dict(n=1), dict(e_dim=0), dict(noise=-1.0)):
        with pytest.raises(ConfigError):
            generate_synthetic_triples(**bad)


def test_generate_ttt_schema(tmp_path):
    path = generate_ttt(tmp_path / "ttt.csv")
    ds = load_csv_triples(path)
    assert len(ds) == 4520
    assert ds.y_space == SpaceDescriptor.categorical(9, ds.y_space.names)
    assert ds.e_space.kind == "categorical" and ds.e_space.size == 4


# --------------------------------------------------------------------- config


@pytest.mark.parametrize(
    "bad",
    [
        dict(method="svm"),
        dict(method="pairwise-ye-knn", pairloss=None),
        dict(method="embed-y-knn", knn_k=()),
        dict(method="multitask", lambdas=()),
        dict(method="lasso", alphas=(-1.0,)),
        dict(method="embed-y-knn", knn_k=(0,)),
        dict(method="baseline-y", transforms={"scale": True}),
        dict(method="baseline-y", source={"kind": "csv"}),
        dict(method="baseline-y", discretizers={"z": [0, 1]}),
        dict(method="baseline-y", discretizers={"y": [1, 0]}),
    ],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        small_cfg(**bad)


def test_config_json_round_trip(tmp_path):
    cfg = small_cfg("pairwise-ye-knn", sigma=0.3, discretizers={"y": [-0.1, 0.1]})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"method": "lasso", "colour": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"method": "lasso", "train": {"epochs": -1}})


def test_method_space_mismatch_is_a_config_stage_error():
    with pytest.raises(ExperimentError) as info:
        run_experiment(small_ttt_cfg("lasso"))
    assert info.value.stage == "config"
    with pytest.raises(ExperimentError) as info:
        run_experiment(small_cfg("cartesian"))
    assert info.value.stage == "config"


def test_missing_data_is_a_load_stage_error(tmp_path):
    cfg = small_cfg("baseline-y", source={"kind": "csv", "path": str(tmp_path / "nope.csv")})
    with pytest.raises(ExperimentError) as info:
        run_experiment(cfg)
    assert info.value.stage == "load"


# ---------------------------------------------------------------------- sweeps


def test_knn_sweep_contract():
    rec = run_experiment(small_cfg("embed-y-knn", knn_k=(1, 2, 5, 10, 15, 20)))
    assert [r.value for r in rec.results] == [1, 2, 5, 10, 15, 20]
    assert rec.sweep_name == "k"
    table = report(rec).splitlines()
    assert len(table) == 2 + 2 + 6


def test_lambda_sweep_contract():
    lams = (100, 250, 500, 1000, 2500, 5000)
    rec = run_experiment(small_cfg("multitask", lambdas=lams, train=TrainConfig(epochs=1, learning_rate=1e-5)))
    assert [r.value for r in rec.results] == list(lams)
    assert len(report(rec).splitlines()) == 2 + 2 + 6


def test_report_json_round_trip():
    rec = run_experiment(small_cfg("multitask"))
    back = RunRecord.from_dict(json.loads(report(rec, "json")))
    assert back == rec
    assert report(back, "json") == report(rec, "json")
    with pytest.raises(ValueError):
        report(rec, "xml")


def test_metric_fields_follow_space_kinds():
    cont = run_experiment(small_cfg("multitask")).results[0].test.to_dict()
    assert "e_accuracy" not in cont and {"y_mae_continuous", "e_mae_continuous", "e_mae_continuous_sum"} <= set(cont)
    cat = run_experiment(small_ttt_cfg("cartesian")).results[0].test.to_dict()
    assert set(cat) == {"n", "y_accuracy", "e_accuracy", "joint_accuracy"}


# ---------------------------------------------------------------- determinism


SYNTH_METHODS = [m for m in METHODS if m != "cartesian"]


@pytest.mark.parametrize("method", SYNTH_METHODS)
def test_report_bitwise_deterministic(method, tmp_path):
    cfg = small_cfg(method)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_cartesian_report_bitwise_deterministic(tmp_path):
    cfg = small_ttt_cfg("cartesian")
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


# ------------------------------------------------------------------ artifacts


@pytest.mark.parametrize("method", METHODS)
def test_reloaded_artifacts_reproduce_in_memory_predictions(method, tmp_path):
    cfg = small_ttt_cfg("cartesian") if method == "cartesian" else small_cfg(method)
    rec = run_experiment(cfg, tmp_path)
    again = evaluate_artifacts(tmp_path)
    assert len(again.results) == len(rec.results)
    for a, b in zip(rec.results, again.results):
        assert a.value == b.value
        for key, val in a.test.to_dict().items():
            assert abs(val - b.test.to_dict()[key]) <= 1e-12


def test_network_artifact_matches_in_memory_forward(tmp_path):
    from ted.experiments import _net_for, _train  # the same helpers run_experiment uses

    cfg = small_cfg("baseline-y")
    prep = prepare(cfg, load_source(cfg))
    net = _train(cfg, _net_for(cfg, prep.train.n_features, [("linear", 1)]), prep.train.features, [prep.train.labels])
    run_experiment(cfg, tmp_path, evaluate=False)
    loaded = load_artifact(tmp_path / "model.json")
    np.testing.assert_allclose(
        forward(loaded, prep.test.features).outputs[0], forward(net, prep.test.features).outputs[0], atol=1e-12, rtol=0
    )


def test_evaluate_overrides_and_split_guard(tmp_path):
    run_experiment(small_cfg("embed-y-knn"), tmp_path, evaluate=False)
    assert not (tmp_path / "report.json").exists()
    rec = evaluate_artifacts(tmp_path, knn_k=[3, 7], sigma=0.5)
    assert [r.value for r in rec.results] == [3, 7]
    assert json.loads((tmp_path / "report.json").read_text())["config"]["sigma"] == 0.5
    doc = json.loads((tmp_path / "split.json").read_text())
    doc["test"] = doc["test"][::-1]
    (tmp_path / "split.json").write_text(json.dumps(doc))
    with pytest.raises(ExperimentError) as info:
        evaluate_artifacts(tmp_path)
    assert info.value.stage == "prepare"


# ------------------------------------------------------------ consistency/audit


def test_cartesian_decoding_matches_argmax(tmp_path):
    cfg = small_ttt_cfg("cartesian")
    run_experiment(cfg, tmp_path)
    prep = prepare(cfg, load_source(cfg))
    net = load_artifact(tmp_path / "model.json")
    pred = net_predictions("cartesian", net, prep.test.features, prep.test.y_space, prep.test.e_space)
    joint = np.argmax(forward(net, prep.test.features).outputs[0], axis=1)
    assert forward(net, prep.test.features).outputs[0].shape[1] == 36
    np.testing.assert_array_equal(pred["joint"], joint)
    for j, y, e in zip(joint, pred["y"], pred["e"]):
        assert (y, e) == cartesian_decode(int(j), 9, 4)


def test_split_id_audit(tmp_path):
    cfg = small_cfg("pairwise-ye-knn", split=SplitSpec((0.6, 0.2, 0.2), 5))
    rec = run_experiment(cfg, tmp_path)
    split = json.loads((tmp_path / "split.json").read_text())
    train, val, test = set(split["train"]), set(split["validation"]), set(split["test"])
    assert not (train & val) and not (train & test) and not (val & test)
    assert len(train | val | test) == 240
    # only training rows are ever stored in the index; validation scoring cannot reach test ids
    index = load_artifact(tmp_path / "index.json")
    assert set(index.ids) == train
    assert rec.results[0].validation.n == len(val) and rec.results[0].test.n == len(test)
    # standardisation statistics come from the training rows alone
    ds = load_source(cfg)
    tr_rows = split_indices(len(ds), cfg.split)[0]
    _, stats = standardize(ds.subset(tr_rows))
    saved = json.loads((tmp_path / "preprocessing.json").read_text())["standardization"]
    assert np.allclose(saved["mean"], stats.mean) and np.allclose(saved["std"], stats.std)


def test_pairwise_diagnostics_recorded():
    rec = run_experiment(small_cfg("pairwise-ye-knn"))
    counts = rec.diagnostics["pair_status_counts"]
    assert sum(counts["y"].values()) == SMALL_PAIRS.pair_count
    assert rec.diagnostics["kernel_fallbacks"] == 0


# ------------------------------------------------------------------------- CLI


def _write_cfg(tmp_path, method="embed-y-knn", **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(small_cfg(method, **kw).to_dict()))
    return path


def test_cli_run_and_report(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "embed-y-knn" in out and len(out.strip().splitlines()) == 2 + 2 + 2
    assert cli.main(["report", str(tmp_path / "run"), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["method"] == "embed-y-knn" and "duration_seconds" not in doc


def test_cli_train_then_evaluate(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "lasso")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 4
    assert cli.main(["evaluate", str(tmp_path / "run"), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    assert [r["value"] for r in doc["results"]] == [0.01, 0.1]
    # report on the directory shows the evaluation, not the score-less training record
    assert cli.main(["report", str(tmp_path / "run"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["results"] == doc["results"]


def test_cli_generate_commands(tmp_path):
    assert cli.main(["generate-synth", "--out", str(tmp_path / "s.csv"), "--n", "50", "--seed", "1"]) == 0
    assert len(load_csv_triples(tmp_path / "s.csv")) == 50
    assert cli.main(["generate-ttt", "--out", str(tmp_path / "t.csv"), "--tie-break", "index"]) == 0
    assert os.path.exists(schema_path_for(tmp_path / "t.csv"))
    assert len(load_csv_triples(tmp_path / "t.csv")) == 4520


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["run"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"method": "svm"}')
    assert cli.main(["run", "--config", str(bad)]) == 1
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert cli.main(["train", "--config", str(_write_cfg(tmp_path))]) == 1  # no output directory
    missing = tmp_path / "m.json"
    missing.write_text(json.dumps({"method": "baseline-y", "source": {"kind": "csv", "path": "absent.csv"}}))
    assert cli.main(["run", "--config", str(missing)]) == 2
    assert cli.main(["report", str(tmp_path / "nowhere")]) == 2
    cfg = _write_cfg(tmp_path)
    cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert cli.main(["evaluate", str(tmp_path / "r"), "--k", "0"]) == 1
    assert cli.main(["evaluate", str(tmp_path / "r"), "--sigma", "-2"]) == 1
    capsys.readouterr()
