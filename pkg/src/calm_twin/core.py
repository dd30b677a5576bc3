"""Domain types shared across the package.

A :class:`ModellingEnvironment` bundles the variable schemas, the dataset of
observed trajectories and the knowledge base. Environments are immutable;
:func:`environment_update` returns a new value with the epoch bumped.
"""

from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

STATE = "state"
ACTION = "action"
GENERAL = "general"
MAX_DECIMALS = 10


class SchemaError(ValueError):
    """Raised when data does not agree with the environment schemas."""


@dataclass(frozen=True)
class VariableSchema:
    name: str
    kind: str
    unit: str = ""
    description: str = ""
    decimals: int = 0
    render_as_flag: bool = False
    bins: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise SchemaError("variable name must be a non-empty string")
        if self.kind not in (STATE, ACTION):
            raise SchemaError(f"{self.name}: kind must be 'state' or 'action', got {self.kind!r}")
        if not (0 <= int(self.decimals) <= MAX_DECIMALS):
            raise SchemaError(f"{self.name}: decimals must be in [0, {MAX_DECIMALS}]")
        if self.bins is not None:
            object.__setattr__(self, "bins", tuple(sorted(float(b) for b in self.bins)))
            if not self.bins:
                raise SchemaError(f"{self.name}: bins must be non-empty when given")

    def discretize(self, value: float) -> float:
        """Map a value onto the discrete alphabet used for action matching.

        With ``bins`` the nearest bin value is returned (ties go to the lower
        bin); otherwise the value is rounded to the schema decimals.
        """
        if self.bins is not None:
            return min(self.bins, key=lambda b: (abs(b - value), b))
        return round(float(value), self.decimals) + 0.0

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "unit": self.unit,
             "description": self.description, "decimals": self.decimals}
        if self.render_as_flag:
            d["render_as_flag"] = True
        if self.bins is not None:
            d["bins"] = list(self.bins)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariableSchema":
        bins = d.get("bins")
        return cls(name=d["name"], kind=d["kind"], unit=d.get("unit", ""),
                   description=d.get("description", ""), decimals=int(d.get("decimals", 0)),
                   render_as_flag=bool(d.get("render_as_flag", False)),
                   bins=tuple(bins) if bins is not None else None)


def _check_values(values: Mapping[str, float], where: str) -> dict[str, float]:
    out = {}
    for k, v in values.items():
        if v is None:
            raise SchemaError(f"{where}: missing value for {k!r}")
        fv = float(v)
        if not math.isfinite(fv):
            raise SchemaError(f"{where}: non-finite value for {k!r}")
        out[str(k)] = fv
    return out


@dataclass(frozen=True, eq=True)
class TimeStep:
    time: float
    state: Mapping[str, float]
    action: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        t = self.time
        # numpy scalars become plain Python numbers
        if isinstance(t, numbers.Integral) and not isinstance(t, bool):
            t = int(t)
        elif isinstance(t, numbers.Real):
            t = float(t)
            if t.is_integer():
                t = int(t)
        if not isinstance(t, (int, float)) or isinstance(t, bool) or not math.isfinite(t):
            raise SchemaError(f"time label must be a finite number, got {self.time!r}")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "state", _check_values(self.state, f"time {t} state"))
        object.__setattr__(self, "action", _check_values(self.action, f"time {t} action"))

    __hash__ = None  # mappings are not hashable

    def to_dict(self) -> dict:
        return {"time": self.time, "state": dict(self.state), "action": dict(self.action)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimeStep":
        return cls(time=d["time"], state=d.get("state", {}), action=d.get("action", {}))


@dataclass(frozen=True)
class Trajectory:
    id: str
    steps: tuple[TimeStep, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise SchemaError(f"trajectory {self.id!r} is empty")
        skeys = set(steps[0].state)
        akeys = set(steps[0].action)
        for prev, cur in zip(steps, steps[1:]):
            if not cur.time > prev.time:
                raise SchemaError(f"trajectory {self.id!r}: times must strictly increase "
                                  f"({prev.time} -> {cur.time})")
        for s in steps:
            if set(s.state) != skeys or set(s.action) != akeys:
                raise SchemaError(f"trajectory {self.id!r}: inconsistent variables at time {s.time}")

    __hash__ = None

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return Trajectory(self.id, self.steps[item])
        return self.steps[item]

    @property
    def times(self) -> list:
        return [s.time for s in self.steps]

    @property
    def state_names(self) -> list[str]:
        return list(self.steps[0].state)

    @property
    def action_names(self) -> list[str]:
        return list(self.steps[0].action)

    @property
    def variable_names(self) -> list[str]:
        return self.state_names + self.action_names

    def state_array(self, names: Sequence[str] | None = None):
        import numpy as np

        names = self.state_names if names is None else list(names)
        return np.array([[s.state[n] for n in names] for s in self.steps], dtype=float)

    def extend(self, steps: Iterable[TimeStep]) -> "Trajectory":
        return Trajectory(self.id, self.steps + tuple(steps))

    def to_dict(self) -> dict:
        return {"id": self.id, "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trajectory":
        return cls(id=str(d["id"]), steps=tuple(TimeStep.from_dict(s) for s in d["steps"]))


@dataclass(frozen=True)
class KnowledgeEntry:
    key: str
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise SchemaError(f"knowledge entry {self.key!r} has empty text")

    def to_dict(self) -> dict:
        return {"key": self.key, "text": self.text}


@dataclass(frozen=True)
class HistoryFuturePair:
    source_id: str
    history: Trajectory
    future: Trajectory | None
    dataset_index: int = -1

    def __post_init__(self):
        if self.future is not None:
            hist_end = self.history.steps[-1].time
            if not self.future.steps[0].time > hist_end:
                raise SchemaError("future must start after the history ends")


@dataclass(frozen=True)
class SimulationConfig:
    """Loop hyperparameters. Defaults are the cystic-fibrosis recipe."""

    context_size: int = 5
    lookback: int = 3
    buffer: int = 1
    horizon: int = 3
    ensemble: int = 1
    temperature: float = 0.0

    def __post_init__(self):
        if self.context_size < 0:
            raise ValueError("context_size must be >= 0")
        for name in ("lookback", "buffer", "horizon", "ensemble"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class ModellingEnvironment:
    schemas: tuple[VariableSchema, ...]
    dataset: tuple[Trajectory, ...] = ()
    knowledge: tuple[KnowledgeEntry, ...] = ()
    epoch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "schemas", tuple(self.schemas))
        object.__setattr__(self, "dataset", tuple(self.dataset))
        object.__setattr__(self, "knowledge", tuple(self.knowledge))
        names = [s.name for s in self.schemas]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")
        for traj in self.dataset:
            self.validate_trajectory(traj)

    __hash__ = None

    @property
    def schema_map(self) -> dict[str, VariableSchema]:
        return {s.name: s for s in self.schemas}

    @property
    def state_schemas(self) -> list[VariableSchema]:
        return [s for s in self.schemas if s.kind == STATE]

    @property
    def action_schemas(self) -> list[VariableSchema]:
        return [s for s in self.schemas if s.kind == ACTION]

    def validate_trajectory(self, traj: Trajectory) -> None:
        smap = self.schema_map
        for name in traj.state_names:
            if name not in smap or smap[name].kind != STATE:
                raise SchemaError(f"trajectory {traj.id!r} references unknown state variable {name!r}")
        for name in traj.action_names:
            if name not in smap or smap[name].kind != ACTION:
                raise SchemaError(f"trajectory {traj.id!r} references unknown action variable {name!r}")

    def get(self, trajectory_id: str) -> Trajectory:
        for traj in self.dataset:
            if traj.id == trajectory_id:
                return traj
        raise KeyError(trajectory_id)

    def update(self, add_schemas=(), add_trajectories=(), add_knowledge=()) -> "ModellingEnvironment":
        return environment_update(self, {"add_schemas": add_schemas,
                                         "add_trajectories": add_trajectories,
                                         "add_knowledge": add_knowledge})


def environment_update(env: ModellingEnvironment, patch: Mapping) -> ModellingEnvironment:
    """Apply a patch and return the next-epoch environment.

    ``patch`` may hold ``add_schemas``, ``add_trajectories`` and
    ``add_knowledge``. Nothing outside the environment is touched, so
    trained encoders stay valid across updates.
    """
    unknown = set(patch) - {"add_schemas", "add_trajectories", "add_knowledge"}
    if unknown:
        raise SchemaError(f"unknown patch keys: {sorted(unknown)}")
    new_schemas = tuple(patch.get("add_schemas") or ())
    existing = {s.name for s in env.schemas}
    for s in new_schemas:
        if s.name in existing:
            raise SchemaError(f"variable {s.name!r} already exists")
        existing.add(s.name)
    return ModellingEnvironment(
        schemas=env.schemas + new_schemas,
        dataset=env.dataset + tuple(patch.get("add_trajectories") or ()),
        knowledge=env.knowledge + tuple(patch.get("add_knowledge") or ()),
        epoch=env.epoch + 1,
    )


# -- files -------------------------------------------------------------------

def dumps_trajectory(traj: Trajectory) -> str:
    return json.dumps(traj.to_dict(), separators=(", ", ": "))


def write_jsonl(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(dumps_trajectory(traj) + "\n")


def read_jsonl(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed trajectory ({exc})") from exc
    return out


def load_environment(path) -> ModellingEnvironment:
    """Read an environment file ``{"schemas", "knowledge", "dataset_path"}``.

    ``dataset_path`` is resolved relative to the environment file.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    schemas = tuple(VariableSchema.from_dict(s) for s in raw.get("schemas", []))
    knowledge = tuple(KnowledgeEntry(k["key"], k["text"]) for k in raw.get("knowledge", []))
    dataset = ()
    if raw.get("dataset_path"):
        dpath = Path(raw["dataset_path"])
        if not dpath.is_absolute():
            dpath = path.parent / dpath
        if not dpath.exists():
            raise SchemaError(f"dataset file not found: {dpath}")
        dataset = tuple(read_jsonl(dpath))
    return ModellingEnvironment(schemas, dataset, knowledge, epoch=int(raw.get("epoch", 0)))


def save_environment(env: ModellingEnvironment, path, dataset_path=None) -> None:
    path = Path(path)
    if dataset_path is None:
        dataset_path = path.with_suffix(".jsonl").name
    dpath = Path(dataset_path)
    if not dpath.is_absolute():
        dpath = path.parent / dpath
    write_jsonl(dpath, env.dataset)
    raw = {
        "schemas": [s.to_dict() for s in env.schemas],
        "knowledge": [k.to_dict() for k in env.knowledge],
        "dataset_path": str(dataset_path),
        "epoch": env.epoch,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(raw, fh, indent=2)
        fh.write("\n")

