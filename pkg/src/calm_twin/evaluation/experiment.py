"""Experiment harness: run several forecasters on a held-out split and report metrics.

An experiment spec (JSON or TOML) looks like::

    name = "nsclc-ablation"
    repeats = 3
    seed = 0
    metrics = ["mse", "mae"]

    [data]                      # or: environment = "env.json"
    kind = "pkpd"
    n = 120
    horizon = 20

    [split]
    n_test = 20
    history = 3
    horizon = 3

    [[methods]]
    name = "calm-random"
    kind = "calm-dt"
    mode = "random"
    backend = "nearest"

    [[methods]]
    name = "1-NN"
    kind = "knn"
    k = 1
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import ModellingEnvironment, SchemaError, SimulationConfig, load_environment
from ..datagen import (PkPdParams, PredatorPreyParams, gen_pkpd, gen_predator_prey,
                       pkpd_environment, predator_prey_schemas)
from ..llm.backends import make_backend
from ..simulator import MODES, ReplayPolicy, simulate
from .baselines import baseline_constant, baseline_knn
from .metrics import METRICS, mean_ci95, score

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

METHOD_KINDS = ("calm-dt", "constant", "knn")
CSV_COLUMNS = ("method", "metric", "mean", "ci95", "n")


class SpecError(ValueError):
    """The experiment spec is invalid or references missing inputs."""


@dataclass
class MethodSpec:
    name: str
    kind: str
    mode: str = "encoder"
    backend: str = "nearest"
    context_size: int = 5
    lookback: int | None = None
    buffer: int = 1
    ensemble: int = 1
    temperature: float = 0.0
    checkpoint: str | None = None
    k: int = 13

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise SpecError(f"method {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "calm-dt" and self.mode not in MODES:
            raise SpecError(f"method {self.name!r}: unknown mode {self.mode!r}")
        if self.k < 1 or self.context_size < 0 or self.buffer < 1 or self.ensemble < 1:
            raise SpecError(f"method {self.name!r}: non-positive size parameter")


@dataclass
class ExperimentSpec:
    name: str
    methods: list[MethodSpec]
    metrics: list[str] = field(default_factory=lambda: ["mse", "mae"])
    environment: str | None = None
    data: dict | None = None
    n_test: int = 20
    history: int = 3
    horizon: int = 3
    repeats: int = 1
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentSpec":
        try:
            methods = [MethodSpec(**m) for m in d["methods"]]
        except (KeyError, TypeError) as exc:
            raise SpecError(f"invalid methods section: {exc}") from exc
        split = d.get("split", {})
        spec = cls(name=d.get("name", "experiment"), methods=methods,
                   metrics=list(d.get("metrics", ["mse", "mae"])),
                   environment=d.get("environment"), data=d.get("data"),
                   n_test=int(split.get("n_test", 20)), history=int(split.get("history", 3)),
                   horizon=int(split.get("horizon", 3)), repeats=int(d.get("repeats", 1)),
                   seed=int(d.get("seed", 0)), base_dir=str(base_dir))
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise SpecError(f"cannot read spec: {exc}") from exc
        try:
            d = tomllib.loads(raw.decode()) if path.suffix == ".toml" else json.loads(raw)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise SpecError(f"{path}: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def validate(self) -> None:
        if not self.methods:
            raise SpecError("no methods")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise SpecError("method names must be unique")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise SpecError(f"unknown metrics {bad}")
        if (self.environment is None) == (self.data is None):
            raise SpecError("give exactly one of 'environment' or 'data'")
        if self.repeats < 1 or self.n_test < 1 or self.history < 1 or self.horizon < 1:
            raise SpecError("repeats, n_test, history and horizon must be positive")
        if self.environment is not None and not (Path(self.base_dir) / self.environment).exists():
            raise SpecError(f"environment file {self.environment!r} not found")


def _environment(spec: ExperimentSpec):
    if spec.environment is not None:
        try:
            return load_environment(Path(spec.base_dir) / spec.environment)
        except (OSError, SchemaError) as exc:
            raise SpecError(str(exc)) from exc
    d = dict(spec.data)
    kind = d.pop("kind", "pkpd")
    n, T, seed = int(d.pop("n", 100)), int(d.pop("horizon", 30)), int(d.pop("seed", spec.seed))
    if kind == "pkpd":
        policy = d.pop("policy", "random")
        return pkpd_environment(gen_pkpd(n, T, PkPdParams(**d.pop("params", {})), policy, seed))
    if kind == "predprey":
        trajs = gen_predator_prey(n, T, PredatorPreyParams(**d.pop("params", {})), seed)
        return ModellingEnvironment(tuple(predator_prey_schemas()), tuple(trajs), ())
    raise SpecError(f"unknown data kind {kind!r}")


def _retriever(method: MethodSpec, base_dir):
    from ..encoder import BiEncoderRetriever
    if method.mode not in ("encoder", "encoder-no-ft", "encoder-no-summary"):
        return None
    if method.checkpoint and method.mode != "encoder-no-ft":
        ret = BiEncoderRetriever.load(Path(base_dir) / method.checkpoint)
        ret.use_summary = method.mode != "encoder-no-summary"
        return ret
    if method.mode == "encoder":
        logger.warning("method %s: no checkpoint, using an untrained encoder", method.name)
    return BiEncoderRetriever(use_summary=method.mode != "encoder-no-summary").initialize()


def _run_method(method: MethodSpec, spec: ExperimentSpec, env, tests, train, repeat_seed: int):
    """Per-test-patient metric values for one repeat."""
    histories = [t[:spec.history] for t in tests]
    truths = [t[spec.history:spec.history + spec.horizon] for t in tests]
    scores = {m: [] for m in spec.metrics}
    if method.kind == "calm-dt":
        backend = make_backend(method.backend, truth=tests, schemas=env.schemas)
        retriever = _retriever(method, spec.base_dir)
        lookback = method.lookback or spec.history
        c = 0 if method.mode == "zero-shot" else method.context_size
        cfg = SimulationConfig(c, lookback, method.buffer, spec.horizon, method.ensemble,
                               method.temperature)
        selector = make_backend("scripted-selector") if method.mode == "llm" else None
        for h, truth in zip(histories, truths):
            result = simulate(env, h, ReplayPolicy.from_trajectory(truth), cfg, backend,
                              retriever, method.mode, repeat_seed, selector=selector)
            runs = [r for r in result.runs if r is not None and len(r) == len(truth)]
            for m in spec.metrics:
                scores[m].append(score(m, runs, truth) if runs else float("nan"))
    else:
        for h, truth in zip(histories, truths):
            if method.kind == "constant":
                pred = baseline_constant(h, spec.horizon)
            else:
                pool = [(d[s:s + spec.history], d.steps[s + spec.history:
                                                         s + spec.history + spec.horizon])
                        for d in train
                        for s in range(len(d) - spec.history - spec.horizon + 1)]
                pred = baseline_knn(h, pool, method.k, spec.horizon)
            for m in spec.metrics:
                # a point forecast's CRPS is its absolute error
                scores[m].append(score("mae" if m == "crps" else m, [pred], truth))
    return scores


def run_experiment(spec: ExperimentSpec, out_dir=None, jobs: int = 1) -> dict:
    """Run every method ``spec.repeats`` times; write ``report.csv``/``report.json`` to ``out_dir``."""
    env = _environment(spec)
    dataset = list(env.dataset)
    need = spec.history + spec.horizon
    if spec.n_test >= len(dataset):
        raise SpecError(f"n_test={spec.n_test} leaves no training data ({len(dataset)} samples)")
    tests, train = dataset[-spec.n_test:], dataset[:-spec.n_test]
    if any(len(t) < need for t in tests):
        raise SpecError(f"test trajectories need at least {need} steps")
    # retrieval only sees the training split
    env = ModellingEnvironment(env.schemas, tuple(train), env.knowledge, env.epoch)
    seeds = [int(s.generate_state(1)[0])
             for s in np.random.SeedSequence(spec.seed).spawn(spec.repeats)]

    def one(method):
        return [_run_method(method, spec, env, tests, train, s) for s in seeds]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(one, spec.methods))
    else:
        outputs = [one(m) for m in spec.methods]
    report = {"name": spec.name, "n_test": len(tests), "repeats": spec.repeats,
              "test_ids": [t.id for t in tests], "methods": []}
    rows = []
    for method, per_repeat in zip(spec.methods, outputs):
        entry = {"name": method.name, "kind": method.kind, "metrics": {}, "per_sample": {}}
        for m in spec.metrics:
            repeat_means = [float(np.nanmean(r[m])) for r in per_repeat]
            mean, ci, n = mean_ci95(repeat_means)
            entry["metrics"][m] = {"mean": mean, "ci95": ci, "n": n}
            entry["per_sample"][m] = [r[m] for r in per_repeat]
            rows.append((method.name, m, mean, ci, n))
        report["methods"].append(entry)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            writer.writerows((n, m, repr(mu), repr(ci), k) for n, m, mu, ci, k in rows)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
