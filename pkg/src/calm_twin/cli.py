"""Command-line entry point: ``calm-twin <command> [flags]``.

Exit codes: 0 success, 2 invalid input, 3 transport failure, 4 a simulation
member could not decode the model's replies.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .codec import CodecError
from .core import (ACTION, KnowledgeEntry, SchemaError, SimulationConfig, VariableSchema,
                   load_environment, read_jsonl, save_environment, write_jsonl)
from .llm.remote import TransportError

logger = logging.getLogger("calm_twin")

EXIT_OK, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_PARSE = 0, 2, 3, 4
BACKEND_CHOICES = ("oracle", "nearest", "analog", "remote")


class ValidationError(Exception):
    pass


def substream(seed: int, name: str) -> int:
    """Independent seed for one named consumer of randomness."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _write_meta(out: Path, command: str, args: dict) -> None:
    # the only file that carries a timestamp, so the outputs themselves stay byte-stable
    meta = {"command": command, "version": __version__,
            "args": {k: v for k, v in args.items() if not callable(v)},
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    Path(f"{out}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str)
                                        + "\n")


def _load_json(path) -> object:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _env(path):
    try:
        return load_environment(path)
    except FileNotFoundError as exc:
        raise ValidationError(f"environment file not found: {path}") from exc
    except (SchemaError, json.JSONDecodeError, KeyError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc


# -- commands ----------------------------------------------------------------

def cmd_generate_data(a) -> int:
    from .core import ModellingEnvironment
    from .datagen import (PkPdParams, PredatorPreyParams, gen_pkpd, gen_predator_prey,
                          pkpd_environment, predator_prey_schemas)

    raw = dict(_load_json(a.params)) if a.params else {}
    seed = substream(a.seed, "datagen")
    try:
        if a.kind == "pkpd":
            params = PkPdParams.from_dict(raw)
            trajs = gen_pkpd(a.n, a.horizon, params, a.policy, seed)
            env = pkpd_environment(trajs)
        else:
            params = PredatorPreyParams(**raw)
            trajs = gen_predator_prey(a.n, a.horizon, params, seed)
            env = ModellingEnvironment(tuple(predator_prey_schemas()), tuple(trajs), ())
    except TypeError as exc:
        raise ValidationError(f"bad generator parameters: {exc}") from exc
    out = Path(a.out)
    write_jsonl(out, trajs)
    Path(f"{out}.params.json").write_text(json.dumps(
        {"kind": a.kind, "n": a.n, "horizon": a.horizon, "seed": a.seed, "policy": a.policy,
         "params": params.to_dict()}, indent=2, sort_keys=True) + "\n")
    if a.env_out:
        env_out = Path(a.env_out)
        save_environment(env, env_out,
                         dataset_path=os.path.relpath(out.resolve(), env_out.resolve().parent))
    _write_meta(out, "generate-data", vars(a))
    print(f"wrote {len(trajs)} trajectories to {out}")
    return EXIT_OK


def cmd_build_contrastive(a) -> int:
    from .contrastive import build_contrastive_set
    from .llm.backends import make_backend

    if a.B >= a.C:
        raise ValidationError("--B must be smaller than --C")
    env = _env(a.env)
    backend = make_backend(a.llm, truth=env.dataset, schemas=env.schemas)
    examples = build_contrastive_set(env, backend, a.scorer, a.C, a.B, a.runs,
                                     substream(a.seed, "sampling"), a.lookback, a.horizon,
                                     a.buffer, a.targets, not a.no_summary, a.temperature,
                                     a.jobs)
    out = Path(a.out)
    with open(out, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")
    _write_meta(out, "build-contrastive", vars(a))
    print(f"wrote {len(examples)} contrastive examples to {out}")
    return EXIT_OK


def cmd_train_encoder(a) -> int:
    from .encoder import BiEncoderRetriever, ContrastiveExample

    try:
        with open(a.contrastive_set, encoding="utf-8") as fh:
            examples = [ContrastiveExample.from_dict(json.loads(line)) for line in fh
                        if line.strip()]
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ValidationError(f"{a.contrastive_set}: {exc}") from exc
    if a.epochs and not examples:
        raise ValidationError("the contrastive set is empty")
    est = BiEncoderRetriever(dimension=a.dimension, n_features=a.features, temperature=a.tau,
                             learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch,
                             weight_decay=a.weight_decay, random_state=a.seed)
    est.fit(examples)
    out = Path(a.out)
    est.save(out)
    Path(f"{out}.loss.json").write_text(json.dumps(
        {"loss_curve": est.loss_curve_, "digest": est.digest()}, indent=2) + "\n")
    _write_meta(out, "train-encoder", vars(a))
    print(f"saved encoder {est.digest()[:12]} to {out}")
    return EXIT_OK


def _policy(spec: str, traj, start: int):
    from .simulator import ConstantPolicy, RepeatLastPolicy, ReplayPolicy, ThresholdPolicy

    if spec == "replay":
        return ReplayPolicy.from_trajectory(traj[start:]) if start < len(traj) else None
    if spec == "repeat-last":
        return RepeatLastPolicy()
    kind, _, arg = spec.partition(":")
    try:
        if kind == "constant":
            return ConstantPolicy(json.loads(arg))
        if kind == "threshold":
            d = json.loads(arg)
            return ThresholdPolicy(d["variable"], float(d["threshold"]), d["above"], d["below"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"bad --policy {spec!r}: {exc}") from exc
    raise ValidationError(f"unknown --policy {spec!r}")


def cmd_simulate(a) -> int:
    from .encoder import BiEncoderRetriever
    from .llm.backends import make_backend
    from .simulator import ENCODER_MODES, simulate

    env = _env(a.env)
    try:
        traj = env.get(a.target_id)
    except KeyError as exc:
        raise ValidationError(f"no trajectory with id {a.target_id!r}") from exc
    start = a.history_steps if a.history_steps is not None else max(a.l, len(traj) - a.F)
    if not a.l <= start <= len(traj):
        raise ValidationError(f"history of {start} steps is incompatible with --l {a.l} and a "
                              f"trajectory of {len(traj)} steps")
    history = traj[:start]
    policy = _policy(a.policy, traj, start)
    if policy is None or (a.policy == "replay" and len(traj) - start < a.F):
        raise ValidationError("replay policy needs --F recorded steps after the history")
    retriever = None
    if a.mode in ENCODER_MODES:
        if a.encoder and a.mode != "encoder-no-ft":
            retriever = BiEncoderRetriever.load(a.encoder)
        else:
            retriever = BiEncoderRetriever().initialize()
        retriever.use_summary = a.mode != "encoder-no-summary"
    c = 0 if a.mode == "zero-shot" else a.c
    try:
        cfg = SimulationConfig(c, a.l, a.r, a.F, a.ensemble, a.temperature)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    backend = make_backend(a.backend, truth=env.dataset, schemas=env.schemas)
    selector = make_backend("scripted-selector") if a.mode == "llm" and a.backend != "remote" \
        else None
    result = simulate(env, history, policy, cfg, backend, retriever, a.mode,
                      substream(a.seed, "sampling"), selector=selector, jobs=a.jobs)
    out = Path(a.out)
    out.write_text(result.to_json() + "\n")
    _write_meta(out, "simulate", vars(a))
    aborted = result.diagnostics["aborted_members"]
    if aborted:
        print(f"members {aborted} aborted: undecodable replies", file=sys.stderr)
        return EXIT_PARSE
    print(f"simulated {a.F} steps x {a.ensemble} members to {out}")
    return EXIT_OK


def cmd_evaluate(a) -> int:
    from .evaluation.experiment import ExperimentSpec, SpecError, run_experiment

    try:
        spec = ExperimentSpec.load(a.spec)
        report = run_experiment(spec, a.out, jobs=a.jobs)
    except SpecError as exc:
        raise ValidationError(str(exc)) from exc
    _write_meta(Path(a.out) / "report", "evaluate", vars(a))
    for m in report["methods"]:
        cells = ", ".join(f"{k}={v['mean']:.4g}±{v['ci95']:.2g}" for k, v in m["metrics"].items())
        print(f"{m['name']}: {cells}")
    return EXIT_OK


def _knowledge_entries(path) -> list[KnowledgeEntry]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError:
        try:
            raw = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    raw = [raw] if isinstance(raw, dict) else raw
    try:
        return [KnowledgeEntry(k["key"], k["text"]) for k in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad knowledge entry ({exc})") from exc


def cmd_env_update(a) -> int:
    from .core import environment_update

    env = _env(a.env)
    patch = {}
    if a.add_action:
        patch["add_schemas"] = [VariableSchema(name, ACTION, a.action_unit, "",
                                               a.action_decimals,
                                               render_as_flag=a.render_as_flag,
                                               bins=(0.0, 1.0) if a.binary else None)
                                for name in a.add_action]
    if a.knowledge_file:
        patch["add_knowledge"] = _knowledge_entries(a.knowledge_file)
    if a.data_file:
        patch["add_trajectories"] = read_jsonl(a.data_file)
    new = environment_update(env, patch)
    for traj in new.dataset:
        new.validate_trajectory(traj)
    out = Path(a.out)
    save_environment(new, out, dataset_path=a.dataset_out)
    _write_meta(out, "env-update", vars(a))
    print(f"environment epoch {env.epoch} -> {new.epoch} written to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calm-twin", description=__doc__.splitlines()[0],
                                allow_abbrev=False)
    p.add_argument("--config", help="JSON or TOML file of flag defaults; a section named after "
                                    "the command overrides top-level keys")
    p.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    p.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        sp.set_defaults(func=fn)
        return sp

    g = add("generate-data", cmd_generate_data, "Generate a synthetic dataset as JSONL.")
    g.add_argument("--kind", choices=("pkpd", "predprey"), default="pkpd", help="generator")
    g.add_argument("--n", type=int, default=500, help="number of trajectories")
    g.add_argument("--horizon", type=int, default=60, help="steps per trajectory")
    g.add_argument("--policy", choices=("random", "threshold", "none"), default="random",
                   help="treatment policy family (pkpd only)")
    g.add_argument("--params", help="JSON file of generator parameters")
    g.add_argument("--env-out", help="also write an environment file for the dataset")
    g.add_argument("--out", required=True, help="output JSONL path")

    b = add("build-contrastive", cmd_build_contrastive,
            "Label candidate samples by simulation quality for encoder training.")
    b.add_argument("--env", required=True, help="environment file")
    b.add_argument("--llm", choices=BACKEND_CHOICES, default="nearest", help="backend")
    b.add_argument("--C", type=int, default=5, help="candidates per target")
    b.add_argument("--B", type=int, default=2, help="negatives per example")
    b.add_argument("--scorer", choices=("mse", "mae", "crps"), default="crps",
                   help="metric used to rank candidates")
    b.add_argument("--runs", type=int, default=5, help="simulated futures per candidate")
    b.add_argument("--lookback", type=int, default=3, help="history length l")
    b.add_argument("--horizon", type=int, default=3, help="simulated steps per candidate")
    b.add_argument("--buffer", type=int, default=1, help="future steps per pair r")
    b.add_argument("--targets", type=int, default=None, help="number of targets (default all)")
    b.add_argument("--temperature", type=float, default=0.0, help="sampling temperature")
    b.add_argument("--no-summary", action="store_true", help="omit trend summaries from texts")
    b.add_argument("--out", required=True, help="output JSONL of examples")

    t = add("train-encoder", cmd_train_encoder, "Train the bi-encoder with InfoNCE.")
    t.add_argument("--contrastive-set", required=True, help="JSONL from build-contrastive")
    t.add_argument("--epochs", type=int, default=8, help="training epochs")
    t.add_argument("--batch", type=int, default=16, help="batch size")
    t.add_argument("--tau", type=float, default=0.07, help="InfoNCE temperature")
    t.add_argument("--lr", type=float, default=1e-2, help="AdamW learning rate")
    t.add_argument("--weight-decay", type=float, default=0.0, help="decoupled weight decay")
    t.add_argument("--dimension", type=int, default=256, help="embedding dimension")
    t.add_argument("--features", type=int, default=4096, help="hash buckets")
    t.add_argument("--out", required=True, help="checkpoint path")

    s = add("simulate", cmd_simulate, "Simulate the future of one trajectory.")
    s.add_argument("--env", required=True, help="environment file")
    s.add_argument("--target-id", required=True, help="trajectory id in the environment")
    s.add_argument("--history-steps", type=int, default=None,
                   help="steps of the target used as history (default: all but the last F)")
    s.add_argument("--policy", default="replay",
                   help="replay | repeat-last | constant:<json> | threshold:<json>")
    s.add_argument("--c", type=int, default=5, help="context samples")
    s.add_argument("--l", type=int, default=3, help="rolling lookback")
    s.add_argument("--r", type=int, default=1, help="resampling buffer")
    s.add_argument("--F", type=int, default=3, help="simulation horizon")
    s.add_argument("--mode", default="encoder",
                   choices=("encoder", "encoder-no-ft", "encoder-no-summary", "random", "llm",
                            "full", "zero-shot"), help="context selection mode")
    s.add_argument("--backend", choices=BACKEND_CHOICES, default="nearest", help="backend")
    s.add_argument("--encoder", help="encoder checkpoint")
    s.add_argument("--ensemble", type=int, default=1, help="ensemble members m")
    s.add_argument("--temperature", type=float, default=0.0, help="sampling temperature")
    s.add_argument("--out", required=True, help="output JSON")

    e = add("evaluate", cmd_evaluate, "Run an experiment spec and write CSV/JSON reports.")
    e.add_argument("--spec", required=True, help="experiment spec (JSON or TOML)")
    e.add_argument("--out", required=True, help="output directory")

    u = add("env-update", cmd_env_update,
            "Add action variables, knowledge and data to an environment.")
    u.add_argument("--env", required=True, help="environment file")
    u.add_argument("--add-action", action="append", default=[], help="new action variable")
    u.add_argument("--action-unit", default="", help="unit of the new actions")
    u.add_argument("--action-decimals", type=int, default=0, help="decimals of the new actions")
    u.add_argument("--binary", action="store_true", help="new actions take values 0/1")
    u.add_argument("--render-as-flag", action="store_true",
                   help="render new actions as bare names when 1")
    u.add_argument("--knowledge-file", help="JSON/JSONL of {key, text} entries")
    u.add_argument("--data-file", help="JSONL trajectories to add")
    u.add_argument("--dataset-out", help="dataset path for the new environment")
    u.add_argument("--out", required=True, help="output environment file")
    return p


def _config_defaults(path, command: str) -> dict:
    if path.endswith(".toml"):
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        try:
            raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    else:
        raw = _load_json(path)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a table of defaults")
    flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    flat.update(raw.get(command, {}))
    return {k.replace("-", "_"): v for k, v in flat.items()}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in rest if tok in commands), None)
    if known.config and command:
        # flags beat the config file, which beats built-in defaults
        try:
            defaults = _config_defaults(known.config, command)
        except ValidationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        sub = commands[command]
        sub_dests = {a.dest for a in sub._actions}
        top_dests = {a.dest for a in parser._actions}
        unknown = set(defaults) - sub_dests - top_dests
        if unknown:
            print(f"error: unknown config keys {sorted(unknown)}", file=sys.stderr)
            return EXIT_VALIDATION
        sub.set_defaults(**{k: v for k, v in defaults.items() if k in sub_dests})
        parser.set_defaults(**{k: v for k, v in defaults.items() if k in top_dests})
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except CodecError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
