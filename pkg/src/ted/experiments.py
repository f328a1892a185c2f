"""End-to-end experiments: load or generate triples, train one method, score it, persist artifacts.

Methods
-------
``baseline-y`` / ``baseline-e``
    single-head network predicting labels or explanations from features
``multitask``
    two heads sharing the trunk, loss ``loss_y + lambda * loss_e`` (sweep over lambda)
``cartesian``
    one softmax over the product of label and explanation classes, decoded afterwards
``embed-y-knn`` / ``embed-e-knn``
    kNN on the last hidden layer of the baseline-y / baseline-e network (sweep over k)
``pairwise-y-knn`` / ``pairwise-e-knn`` / ``pairwise-ye-knn``
    the baseline-y embedding refined with the label, explanation or joint
    pair loss before indexing (sweep over k)
``lasso`` / ``multitask-l21``
    sparse linear baselines (sweep over alpha)
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import knn as knn_mod
from .dataset import (
    CATEGORICAL,
    Discretizer,
    SpaceDescriptor,
    SplitSpec,
    TripleDataset,
    cartesian_decode,
    load_csv_triples,
    quantile_thresholds,
    split_indices,
    standardize,
    transform_log_offset,
    write_csv_triples,
)
from .metrics import MetricsReport, evaluate_run, format_table
from .models import (
    LINEAR,
    SOFTMAX,
    LinearModel,
    Network,
    TrainConfig,
    embed,
    fit_lasso,
    fit_multitask_l21,
    forward,
    init_network,
    train_sgd,
)
from .pairloss import PairLossConfig, sample_pairs, train_embedding
from .tictactoe import build_ttt_dataset

NET_METHODS = ("baseline-y", "baseline-e", "multitask", "cartesian")
KNN_METHODS = ("embed-y-knn", "embed-e-knn", "pairwise-y-knn", "pairwise-e-knn", "pairwise-ye-knn")
LINEAR_METHODS = ("lasso", "multitask-l21")
METHODS = NET_METHODS + KNN_METHODS + LINEAR_METHODS
PAIR_OBJECTIVE = {"pairwise-y-knn": "y", "pairwise-e-knn": "e", "pairwise-ye-knn": "ye"}
SWEEP_NAME = {"multitask": "lambda", "lasso": "alpha", "multitask-l21": "alpha"}


class ExperimentError(RuntimeError):
    """Failure during a run; ``stage`` names the step that failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- synthetic data


def generate_synthetic_triples(
    n: int = 1000,
    n_features: int = 20,
    e_dim: int = 5,
    n_clusters: int = 4,
    noise: float = 0.05,
    cluster_spread: float = 3.0,
    seed: int = 0,
) -> TripleDataset:
    """Tabular stand-in for rated-attribute corpora.

    Features come from a Gaussian mixture, explanations are a smooth
    (``tanh`` of linear) function of the features plus noise, and the label
    is a linear function of the explanations plus noise, so explanations are
    informative about the label by construction.
    """
    if n < 2 or n_features < 1 or e_dim < 1 or n_clusters < 1 or noise < 0:
        raise ConfigError("synthetic spec needs n >= 2, positive dimensions and noise >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, cluster_spread, size=(n_clusters, n_features))
    assign = rng.integers(0, n_clusters, size=n)
    X = centers[assign] + rng.normal(size=(n, n_features))
    A = rng.normal(0.0, 1.0 / np.sqrt(n_features * cluster_spread**2 + n_features), size=(n_features, e_dim)) * 2.0
    E = np.tanh(X @ A) + noise * rng.normal(size=(n, e_dim))
    w = rng.normal(size=e_dim)
    Y = E @ w / np.sqrt(e_dim) + noise * rng.normal(size=n)
    return TripleDataset(
        features=X,
        labels=Y,
        explanations=E,
        y_space=SpaceDescriptor.scalar("y"),
        e_space=SpaceDescriptor.vector(e_dim, [f"e{i}" for i in range(e_dim)]),
        ids=[f"s{i}" for i in range(n)],
        feature_names=[f"x{i}" for i in range(n_features)],
    )


def generate_ttt(out, mode: str = "move-and-explanation", tie_break: str = "preference") -> str:
    """Write the tic-tac-toe triples as CSV (+ schema sidecar); returns the CSV path."""
    ds = build_ttt_dataset(mode, tie_break)
    write_csv_triples(ds, out, label_names=["move"], explanation_names=["reason"])
    return os.fspath(out)


# ------------------------------------------------------------------------ config


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    source: dict = field(default_factory=lambda: {"kind": "ttt"})
    transforms: dict = field(default_factory=dict)
    split: SplitSpec = SplitSpec((0.9, 0.0, 0.1), 0)
    hidden: tuple = (200,)
    activation: Any = "relu"
    train: TrainConfig = TrainConfig()
    pair_train: TrainConfig = TrainConfig(epochs=15, batch_size=64, learning_rate=0.01)
    pairloss: PairLossConfig | None = None
    knn_k: tuple = (1, 2, 5, 10, 15, 20)
    sigma: Any = "adaptive"
    lambdas: tuple = (1.0,)
    alphas: tuple = (0.01,)
    discretizers: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        kind = self.source.get("kind")
        if kind not in ("ttt", "csv", "synthetic"):
            raise ConfigError("source.kind must be 'ttt', 'csv' or 'synthetic'")
        if kind == "csv" and "path" not in self.source:
            raise ConfigError("csv source needs a path")
        unknown = set(self.transforms) - {"log_offset", "standardize"}
        if unknown:
            raise ConfigError(f"unknown transforms {sorted(unknown)}")
        if self.method.startswith("pairwise") and self.pairloss is None:
            raise ConfigError(f"{self.method} requires a pairloss section")
        if self.method in KNN_METHODS and not self.knn_k:
            raise ConfigError("knn sweep (knn_k) is empty")
        if self.method == "multitask" and not self.lambdas:
            raise ConfigError("lambda sweep is empty")
        if self.method in LINEAR_METHODS and not self.alphas:
            raise ConfigError("alpha sweep is empty")
        if any(v < 0 for v in self.lambdas) or any(v < 0 for v in self.alphas):
            raise ConfigError("lambda and alpha values must be >= 0")
        for key in self.discretizers:
            if key not in ("y", "e"):
                raise ConfigError(f"discretizer key must be 'y' or 'e', got {key!r}")
        try:
            for k in self.knn_k:
                knn_mod.KnnConfig(k, self.sigma)
            for val in self.discretizers.values():
                if val is not None:
                    Discretizer(*val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def sweep_name(self) -> str:
        if self.method in KNN_METHODS:
            return "k"
        return SWEEP_NAME.get(self.method, "NA")

    @property
    def sweep_values(self) -> tuple:
        if self.method in KNN_METHODS:
            return tuple(self.knn_k)
        if self.method == "multitask":
            return tuple(self.lambdas)
        if self.method in LINEAR_METHODS:
            return tuple(self.alphas)
        return ("NA",)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "source": dict(self.source),
            "transforms": dict(self.transforms),
            "split": {"fractions": list(self.split.fractions), "seed": self.split.seed},
            "hidden": list(self.hidden),
            "activation": list(self.activation) if isinstance(self.activation, (list, tuple)) else self.activation,
            "train": _train_dict(self.train),
            "pair_train": _train_dict(self.pair_train),
            "pairloss": self.pairloss.to_dict() if self.pairloss is not None else None,
            "knn_k": list(self.knn_k),
            "sigma": self.sigma,
            "lambdas": list(self.lambdas),
            "alphas": list(self.alphas),
            "discretizers": {k: (list(v) if v is not None else None) for k, v in self.discretizers.items()},
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "method" not in d:
            raise ConfigError("config needs a method")
        try:
            if "split" in d:
                s = d["split"]
                d["split"] = SplitSpec(tuple(s.get("fractions", (0.9, 0.0, 0.1))), int(s.get("seed", 0)))
            for key in ("train", "pair_train"):
                if key in d:
                    d[key] = TrainConfig.from_dict({k: v for k, v in d[key].items() if k != "seed"})
            if d.get("pairloss") is not None:
                d["pairloss"] = PairLossConfig.from_dict(d["pairloss"])
            for key in ("hidden", "knn_k", "lambdas", "alphas"):
                if key in d:
                    d[key] = _tuple(d[key])
            if isinstance(d.get("activation"), list):
                d["activation"] = tuple(d["activation"])
            if isinstance(d.get("sigma"), (int, float)):
                d["sigma"] = float(d["sigma"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _train_dict(tc: TrainConfig) -> dict:
    d = tc.to_dict()
    d.pop("seed", None)
    return d


# ------------------------------------------------------------------------ record


@dataclass
class SweepResult:
    value: Any
    test: MetricsReport
    validation: MetricsReport | None = None

    def to_dict(self) -> dict:
        d = {"value": self.value, "test": self.test.to_dict()}
        if self.validation is not None:
            d["validation"] = self.validation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "SweepResult":
        val = d.get("validation")
        return cls(d["value"], MetricsReport.from_dict(d["test"]), MetricsReport.from_dict(val) if val else None)


@dataclass
class RunRecord:
    config: dict
    method: str
    sweep_name: str
    results: list[SweepResult]
    artifacts: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    duration: float | None = field(default=None, compare=False)

    def to_dict(self, include_duration: bool = False) -> dict:
        d = {
            "method": self.method,
            "sweep": self.sweep_name,
            "results": [r.to_dict() for r in self.results],
            "sizes": dict(self.sizes),
            "artifacts": dict(self.artifacts),
            "diagnostics": dict(self.diagnostics),
            "config": self.config,
        }
        if include_duration:
            d["duration_seconds"] = self.duration
        return d

    @classmethod
    def from_dict(cls, d) -> "RunRecord":
        return cls(
            config=d["config"],
            method=d["method"],
            sweep_name=d["sweep"],
            results=[SweepResult.from_dict(r) for r in d["results"]],
            artifacts=d.get("artifacts", {}),
            sizes=d.get("sizes", {}),
            diagnostics=d.get("diagnostics", {}),
            duration=d.get("duration_seconds"),
        )

    def result(self, value) -> SweepResult:
        for r in self.results:
            if r.value == value:
                return r
        raise KeyError(value)


def report(record: RunRecord, fmt: str = "text") -> str:
    """Render a run as a sweep-by-metric text table or as stable JSON (no timing)."""
    if fmt == "json":
        return json.dumps(record.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    parts = [f"{record.method}  (train {record.sizes.get('train')}, test {record.sizes.get('test')})", ""]
    parts.append(format_table(((record.method, r.value, r.test) for r in record.results), record.sweep_name))
    if any(r.validation is not None for r in record.results):
        parts += ["", "validation:"]
        parts.append(
            format_table(((record.method, r.value, r.validation) for r in record.results if r.validation), record.sweep_name)
        )
    return "\n".join(parts) + "\n"


# ------------------------------------------------------------------------ running


@dataclass
class Prepared:
    train: TripleDataset
    validation: TripleDataset
    test: TripleDataset
    discretizers: dict
    standardization: Any = None


def load_source(cfg: ExperimentConfig, base_dir: str | None = None) -> TripleDataset:
    src = dict(cfg.source)
    kind = src.pop("kind")
    if kind == "ttt":
        return build_ttt_dataset(src.get("mode", "move-and-explanation"), src.get("tie_break", "preference"))
    if kind == "synthetic":
        return generate_synthetic_triples(**src)
    path = src["path"]
    schema = src.get("schema")
    if base_dir is not None:
        path = os.path.join(base_dir, path)
        if isinstance(schema, str):
            schema = os.path.join(base_dir, schema)
    return load_csv_triples(path, schema)


def prepare(cfg: ExperimentConfig, ds: TripleDataset) -> Prepared:
    """Transform and split; standardisation and discretiser thresholds come from train rows only."""
    if cfg.transforms.get("log_offset"):
        ds = transform_log_offset(ds)
    train, val, test = (ds.subset(i) for i in split_indices(len(ds), cfg.split))
    stats = None
    if cfg.transforms.get("standardize"):
        train, stats = standardize(train)
        val, _ = standardize(val, stats)
        test, _ = standardize(test, stats)
    discs = {}
    for key, space, values in (("y", train.y_space, train.labels), ("e", train.e_space, train.explanations)):
        if space.kind == CATEGORICAL:
            continue
        given = cfg.discretizers.get(key)
        discs[key] = Discretizer(*given) if given is not None else quantile_thresholds(values)
    return Prepared(train, val, test, discs, stats)


def _head(space: SpaceDescriptor):
    return (SOFTMAX, space.size) if space.kind == CATEGORICAL else (LINEAR, space.n_columns)


def _net_for(cfg, n_in, heads):
    sizes = (n_in, *cfg.hidden, *(s for _, s in heads))
    return init_network(sizes, [k for k, _ in heads], seed=cfg.seed, activation=cfg.activation)


def _train(cfg, net, X, targets, head_weights=None):
    tc = dataclasses.replace(cfg.train, seed=cfg.seed, head_weights=head_weights)
    return train_sgd(net, X, targets, tc).network


def _decode_head(output, space):
    return np.argmax(output, axis=1) if space.kind == CATEGORICAL else _squeeze(output, space)


def _squeeze(values, space):
    return values[:, 0] if space.kind != "continuous-vector" else values


def net_predictions(method: str, net: Network, X, y_space: SpaceDescriptor, e_space: SpaceDescriptor) -> dict:
    """Predictions of a trained network method (baseline, multitask or cartesian)."""
    out = forward(net, X).outputs
    if method == "baseline-y":
        return {"y": _decode_head(out[0], y_space)}
    if method == "baseline-e":
        return {"e": _decode_head(out[0], e_space)}
    if method == "multitask":
        return {"y": _decode_head(out[0], y_space), "e": _decode_head(out[1], e_space)}
    if method == "cartesian":
        joint = np.argmax(out[0], axis=1)
        y, e = cartesian_decode(joint, y_space.size, e_space.size)
        return {"y": y, "e": e, "joint": joint}
    raise ValueError(method)


def linear_predictions(method: str, model: LinearModel, X, y_space, e_space) -> dict:
    P = model.predict(X)
    if method == "lasso":
        return {"y": P}
    P = P.reshape(len(P), -1)
    return {"y": P[:, 0], "e": _squeeze(P[:, 1:], e_space)}


def knn_predictions(index, X_embedded, k, sigma) -> tuple[dict, int]:
    y, e, fallbacks = knn_mod.predict_batch(index, X_embedded, knn_mod.KnnConfig(k, sigma))
    return {"y": y, "e": e}, fallbacks


def _truth(ds: TripleDataset) -> dict:
    t = {"y": ds.labels, "e": ds.explanations}
    if ds.y_space.kind == CATEGORICAL and ds.e_space.kind == CATEGORICAL:
        t["joint"] = ds.joint_labels()
    return t


def _score(pred, ds, discs):
    return evaluate_run(pred, _truth(ds), {"y": ds.y_space, "e": ds.e_space}, discs)


def _sweep_tag(value) -> str:
    return str(value).replace("/", "_")


def _model_name(cfg: ExperimentConfig, value) -> str:
    if cfg.method in KNN_METHODS or len(cfg.sweep_values) == 1:
        return "model.json"
    return f"model_{cfg.sweep_name}={_sweep_tag(value)}.json"


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, evaluate: bool = True, base_dir: str | None = None) -> RunRecord:
    """Run one method end to end; deterministic for a fixed config.

    Artifacts (split ids, discretisers, models or indexes, ``report.json``,
    ``run.json``) go to ``out_dir`` (default ``cfg.output_dir``) when set.
    With ``evaluate=False`` only training and persistence happen.
    """
    started = time.perf_counter()
    out_dir = out_dir if out_dir is not None else cfg.output_dir
    stage = "load"
    try:
        ds = load_source(cfg, base_dir)
        stage = "prepare"
        prep = prepare(cfg, ds)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(stage, str(exc)) from exc
    train, val, test = prep.train, prep.validation, prep.test
    if len(train) == 0 or len(test) == 0:
        raise ExperimentError("prepare", "train and test partitions must be non-empty")

    diagnostics: dict[str, Any] = {}
    results: list[SweepResult] = []
    saved: list[tuple[str, Any]] = []

    def score(pred_fn, value):
        if not evaluate:
            return
        rep_test = _score(pred_fn(test), test, prep.discretizers)
        rep_val = _score(pred_fn(val), val, prep.discretizers) if len(val) else None
        results.append(SweepResult(value, rep_test, rep_val))

    method = cfg.method
    y_space, e_space = train.y_space, train.e_space
    stage = "train"
    try:
        if method in NET_METHODS:
            if method == "baseline-y":
                heads, targets, weights_for = [_head(y_space)], [train.labels], [None]
            elif method == "baseline-e":
                heads, targets, weights_for = [_head(e_space)], [train.explanations], [None]
            elif method == "multitask":
                heads = [_head(y_space), _head(e_space)]
                targets = [train.labels, train.explanations]
                weights_for = [(1.0, float(lam)) for lam in cfg.lambdas]
            else:
                if y_space.kind != CATEGORICAL or e_space.kind != CATEGORICAL:
                    raise ConfigError("cartesian method needs categorical labels and explanations")
                heads = [(SOFTMAX, y_space.size * e_space.size)]
                targets, weights_for = [train.joint_labels()], [None]
            sweep = cfg.sweep_values
            for value, hw in zip(sweep, weights_for):
                stage = "train"
                net = _train(cfg, _net_for(cfg, train.n_features, heads), train.features, targets, hw)
                name = _model_name(cfg, value)
                saved.append((name, net))
                stage = "evaluate"
                score(lambda d, net=net: net_predictions(method, net, d.features, y_space, e_space), value)

        elif method in KNN_METHODS:
            base_on_e = method == "embed-e-knn"
            space = e_space if base_on_e else y_space
            target = train.explanations if base_on_e else train.labels
            net = _train(cfg, _net_for(cfg, train.n_features, [_head(space)]), train.features, [target])
            if method in PAIR_OBJECTIVE:
                stage = "pair-train"
                pcfg = cfg.pairloss.with_(objective=PAIR_OBJECTIVE[method])
                pairs = sample_pairs(train, pcfg.pair_count, pcfg, pcfg.pair_seed)
                diagnostics["pair_status_counts"] = pairs.counts()
                ptc = dataclasses.replace(cfg.pair_train, seed=cfg.seed)
                res = train_embedding(net, train.features, pairs, ptc, pcfg)
                net = res.network
                diagnostics["pair_loss_first_last"] = [res.losses[0], res.losses[-1]] if res.losses else []
                diagnostics["zero_norm_pairs"] = res.diagnostics.get("zero_norm_pairs", 0)
            saved.append(("model.json", net))
            stage = "index"
            index = knn_mod.build_index(
                embed(net, train.features), train.labels, train.explanations, train.ids, y_space, e_space
            )
            saved.append(("index.json", index))
            stage = "evaluate"
            fallback_total = 0
            for k in cfg.knn_k:
                if not evaluate:
                    break

                def pred(d, k=k):
                    nonlocal fallback_total
                    p, fb = knn_predictions(index, embed(net, d.features), k, cfg.sigma)
                    fallback_total += fb
                    return p

                score(pred, k)
            diagnostics["kernel_fallbacks"] = fallback_total

        else:
            if y_space.kind == CATEGORICAL:
                raise ConfigError(f"{method} needs a continuous label")
            if method == "multitask-l21" and e_space.kind == CATEGORICAL:
                raise ConfigError("multitask-l21 needs continuous explanations")
            for alpha in cfg.alphas:
                stage = "train"
                if method == "lasso":
                    model = fit_lasso(train.features, train.labels, alpha)
                else:
                    Y = np.column_stack([train.labels, train.explanations])
                    model = fit_multitask_l21(train.features, Y, alpha)
                diagnostics.setdefault("converged", {})[str(alpha)] = model.converged
                name = _model_name(cfg, alpha)
                saved.append((name, model))
                stage = "evaluate"
                score(lambda d, model=model: linear_predictions(method, model, d.features, y_space, e_space), alpha)
    except ExperimentError:
        raise
    except ConfigError as exc:
        raise ExperimentError("config", str(exc)) from exc
    except Exception as exc:
        raise ExperimentError(stage, f"{type(exc).__name__}: {exc}") from exc

    sizes = {"train": len(train), "validation": len(val), "test": len(test)}
    record = RunRecord(cfg.to_dict(), method, cfg.sweep_name, results, {}, sizes, diagnostics)
    if out_dir is not None:
        stage = "persist"
        try:
            record.artifacts = _persist(out_dir, cfg, prep, saved)
            record.duration = time.perf_counter() - started
            if evaluate:
                _write(os.path.join(out_dir, "report.json"), report(record, "json"))
            _write(os.path.join(out_dir, "run.json"), json.dumps(record.to_dict(include_duration=True), sort_keys=True, indent=2) + "\n")
        except OSError as exc:
            raise ExperimentError(stage, str(exc)) from exc
    record.duration = time.perf_counter() - started
    return record


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _persist(out_dir, cfg, prep, saved) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    arts = {}
    split_doc = {
        "train": prep.train.ids.tolist(),
        "validation": prep.validation.ids.tolist(),
        "test": prep.test.ids.tolist(),
    }
    _write(os.path.join(out_dir, "split.json"), json.dumps(split_doc) + "\n")
    arts["split"] = "split.json"
    prep_doc = {"discretizers": {k: d.to_dict() for k, d in sorted(prep.discretizers.items())}}
    if prep.standardization is not None:
        prep_doc["standardization"] = prep.standardization.to_dict()
    _write(os.path.join(out_dir, "preprocessing.json"), json.dumps(prep_doc, sort_keys=True) + "\n")
    arts["preprocessing"] = "preprocessing.json"
    _write(os.path.join(out_dir, "config.json"), json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    arts["config"] = "config.json"
    for name, obj in saved:
        _write(os.path.join(out_dir, name), json.dumps(obj.to_dict()) + "\n")
        arts[name[: -len(".json")]] = name
    return arts


def load_artifact(path):
    """Load a persisted network, linear model or embedding index by sniffing its keys."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if "heads" in d:
        return Network.from_dict(d)
    if "embeddings" in d:
        return knn_mod.EmbeddingIndex.from_dict(d)
    if "coefficients" in d:
        return LinearModel.from_dict(d)
    raise ValueError(f"{path}: not a recognised model or index artifact")


def evaluate_artifacts(run_dir, knn_k=None, sigma=None, base_dir=None) -> RunRecord:
    """Score the models persisted in ``run_dir`` on its test (and validation) rows.

    The dataset is rebuilt from the saved config; the partition must match
    the saved ``split.json``. ``knn_k``/``sigma`` override the kNN sweep.
    Writes ``report.json`` into ``run_dir`` and returns the record.
    """
    started = time.perf_counter()
    stage = "load"
    try:
        cfg = ExperimentConfig.load(os.path.join(run_dir, "config.json"))
        if knn_k is not None:
            cfg = cfg.replace(knn_k=_tuple(knn_k))
        if sigma is not None:
            cfg = cfg.replace(sigma=sigma)
        ds = load_source(cfg, base_dir)
        stage = "prepare"
        prep = prepare(cfg, ds)
        with open(os.path.join(run_dir, "split.json"), encoding="utf-8") as fh:
            saved_split = json.load(fh)
        if saved_split["test"] != prep.test.ids.tolist() or saved_split["train"] != prep.train.ids.tolist():
            raise ExperimentError("prepare", "rebuilt split does not match split.json")
        stage = "load-model"
        method = cfg.method
        test, val = prep.test, prep.validation
        y_space, e_space = test.y_space, test.e_space
        results = []
        diagnostics: dict[str, Any] = {}

        def score(pred_fn, value):
            rep_val = _score(pred_fn(val), val, prep.discretizers) if len(val) else None
            results.append(SweepResult(value, _score(pred_fn(test), test, prep.discretizers), rep_val))

        if method in KNN_METHODS:
            net = load_artifact(os.path.join(run_dir, "model.json"))
            index = load_artifact(os.path.join(run_dir, "index.json"))
            stage = "evaluate"
            fallbacks = 0
            for k in cfg.knn_k:

                def pred(d, k=k):
                    nonlocal fallbacks
                    p, fb = knn_predictions(index, embed(net, d.features), k, cfg.sigma)
                    fallbacks += fb
                    return p

                score(pred, k)
            diagnostics["kernel_fallbacks"] = fallbacks
        else:
            for value in cfg.sweep_values:
                stage = "load-model"
                model = load_artifact(os.path.join(run_dir, _model_name(cfg, value)))
                stage = "evaluate"
                if method in NET_METHODS:
                    score(lambda d, m=model: net_predictions(method, m, d.features, y_space, e_space), value)
                else:
                    score(lambda d, m=model: linear_predictions(method, m, d.features, y_space, e_space), value)
    except (ExperimentError, ConfigError):
        raise
    except Exception as exc:
        raise ExperimentError(stage, f"{type(exc).__name__}: {exc}") from exc
    sizes = {"train": len(prep.train), "validation": len(val), "test": len(test)}
    record = RunRecord(cfg.to_dict(), method, cfg.sweep_name, results, {}, sizes, diagnostics)
    record.artifacts = {name[: -len(".json")]: name for name in sorted(os.listdir(run_dir))
                        if name.endswith(".json") and name not in ("report.json", "run.json")}
    record.duration = time.perf_counter() - started
    try:
        _write(os.path.join(run_dir, "report.json"), report(record, "json"))
    except OSError as exc:
        raise ExperimentError("persist", str(exc)) from exc
    return record
