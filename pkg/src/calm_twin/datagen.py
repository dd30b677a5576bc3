"""Synthetic cohorts: tumour growth under chemo/radiotherapy and predator-prey.

The tumour model is a surrogate with Gompertz growth, log-linear chemo kill,
linear-quadratic radiation kill and first-order drug clearance::

    C(t+1) = exp(-clearance) * C(t) + dose_c(t)
    V(t+1) = V(t) * exp(rho * ln(K / max(V(t), eps)) - beta_c * C(t)
                        - (alpha_r * d_r(t) + beta_r * d_r(t)**2) + sigma * xi)

It is not a reproduction of any published parameterisation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import (ACTION, GENERAL, STATE, KnowledgeEntry, ModellingEnvironment, TimeStep,
                   Trajectory, VariableSchema)

VOLUME = "tumour_volume"
CONCENTRATION = "chemotherapy_drug_concentration"
CHEMO = "chemotherapy_dosage"
RADIO = "radiotherapy_dosage"
CHEMO_DOSES = (0.0, 5.0)
RADIO_DOSES = (0.0, 2.0)
VOLUME_FLOOR = 1e-3
DEATH_DIAMETER_CM = 13.0
PARAMS_VERSION = "surrogate-1"


@dataclass(frozen=True)
class PkPdParams:
    growth_rate: float = 0.02
    carrying_capacity: float = 3000.0
    chemo_kill: float = 0.02
    radio_alpha: float = 0.06
    radio_beta: float = 0.005
    clearance: float = 0.5
    noise: float = 0.0
    initial_volume: tuple[float, float] = (100.0, 700.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "initial_volume", tuple(self.initial_volume))
        for name in ("growth_rate", "carrying_capacity", "chemo_kill", "radio_alpha",
                     "radio_beta", "clearance", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.initial_volume
        if not 0 < lo <= hi:
            raise ValueError("initial_volume must satisfy 0 < low <= high")
        if self.carrying_capacity <= hi:
            raise ValueError("carrying_capacity must exceed the largest initial volume")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_volume"] = list(self.initial_volume)
        d["version"] = PARAMS_VERSION
        return d

    @classmethod
    def from_dict(cls, d) -> "PkPdParams":
        d = {k: v for k, v in d.items() if k != "version"}
        return cls(**d)


def pkpd_schemas() -> list[VariableSchema]:
    return [
        VariableSchema(VOLUME, STATE, "cm^3", "Volume of the tumour with units cm^3.", 2),
        VariableSchema(CONCENTRATION, STATE, "mg/m^3",
                       "Concentration of the chemotherapy drug vinblastine with units mg/m^3.", 2),
        VariableSchema(CHEMO, ACTION, "mg/m^3",
                       "Dosage of the chemotherapy drug vinblastine with units mg/m^3.", 0,
                       bins=CHEMO_DOSES),
        VariableSchema(RADIO, ACTION, "Gy", "Dosage of the radiotherapy with units Gy.", 0,
                       bins=RADIO_DOSES),
    ]


PKPD_GENERAL = ("The data describes treatment responses for combined chemo and radiation therapy "
                "for non-small cell lung cancer patients, generated from a bio-mathematical model. "
                "The time unit is in days.")


def pkpd_knowledge(schemas=None) -> list[KnowledgeEntry]:
    schemas = schemas or pkpd_schemas()
    return [KnowledgeEntry(GENERAL, PKPD_GENERAL)] + [
        KnowledgeEntry(s.name, s.description) for s in schemas if s.description]


def pkpd_step(volume: float, concentration: float, dose_c: float, dose_r: float,
              params: PkPdParams, xi: float = 0.0, extra_kill: float = 0.0) -> tuple[float, float]:
    """One day of the surrogate dynamics; returns ``(volume, concentration)``."""
    p = params
    growth = p.growth_rate * math.log(p.carrying_capacity / max(volume, VOLUME_FLOOR))
    log_change = (growth - p.chemo_kill * concentration
                  - (p.radio_alpha * dose_r + p.radio_beta * dose_r ** 2)
                  - extra_kill + p.noise * xi)
    new_volume = min(max(volume * math.exp(log_change), VOLUME_FLOOR), p.carrying_capacity)
    new_conc = math.exp(-p.clearance) * concentration + dose_c
    return new_volume, new_conc


def _schedule(policy: str, rng, T: int, volume0: float, options: dict):
    if policy == "none":
        return np.zeros(T), np.zeros(T), None
    if policy == "random":
        pc = options.get("chemo_prob", 0.3)
        pr = options.get("radio_prob", 0.3)
        return ((rng.random(T) < pc) * CHEMO_DOSES[1], (rng.random(T) < pr) * RADIO_DOSES[1],
                None)
    if policy == "threshold":
        return None, None, options.get("threshold", 0.8 * volume0)
    raise ValueError(f"unknown policy family {policy!r}")


def _round(x: float, decimals: int = 2) -> float:
    return round(x, decimals) + 0.0


def gen_pkpd(n: int, T: int, params: PkPdParams | None = None, policy: str = "random",
             seed: int | None = None, policy_options: dict | None = None,
             round_states: bool = True, id_prefix: str = "pkpd") -> list[Trajectory]:
    """Simulate ``n`` patients for ``T`` daily steps.

    Policy families: ``random`` (independent daily doses), ``threshold``
    (full dosing while the volume exceeds a threshold) and ``none``.
    Recorded states are rounded to 2 decimals when ``round_states``; the
    dynamics run at full precision.
    """
    params = params or PkPdParams()
    if T < 2:
        raise ValueError("T must be >= 2")
    if n < 0:
        raise ValueError("n must be >= 0")
    seed = params.seed if seed is None else seed
    options = policy_options or {}
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        lo, hi = params.initial_volume
        volume, conc = float(rng.uniform(lo, hi)), 0.0
        chemo, radio, threshold = _schedule(policy, rng, T, volume, options)
        noise = rng.standard_normal(T)
        steps = []
        for t in range(T):
            if threshold is not None:
                on = volume >= threshold
                dc, dr = (CHEMO_DOSES[1], RADIO_DOSES[1]) if on else (0.0, 0.0)
            else:
                dc, dr = float(chemo[t]), float(radio[t])
            state = {VOLUME: volume, CONCENTRATION: conc}
            if round_states:
                state = {k: _round(v) for k, v in state.items()}
            steps.append(TimeStep(t, state, {CHEMO: dc, RADIO: dr}))
            volume, conc = pkpd_step(volume, conc, dc, dr, params, float(noise[t]))
        out.append(Trajectory(f"{id_prefix}-{i:04d}", steps))
    return out


def pkpd_environment(trajectories: Sequence[Trajectory]) -> ModellingEnvironment:
    schemas = pkpd_schemas()
    return ModellingEnvironment(tuple(schemas), tuple(trajectories), tuple(pkpd_knowledge(schemas)))


# -- predator-prey -------------------------------------------------------------

PREY, PREDATOR = "prey", "predator"


@dataclass(frozen=True)
class PredatorPreyParams:
    prey_growth: float = 1.0
    predation: float = 0.1
    predator_gain: float = 0.075
    predator_death: float = 1.5
    dt: float = 0.01
    substeps: int = 10
    noise: float = 0.0
    initial_prey: tuple[float, float] = (10.0, 40.0)
    initial_predator: tuple[float, float] = (5.0, 15.0)
    seed: int = 0

    @property
    def equilibrium(self) -> tuple[float, float]:
        return self.predator_death / self.predator_gain, self.prey_growth / self.predation

    def invariant(self, x: float, y: float) -> float:
        return (self.predator_gain * x - self.predator_death * math.log(x)
                + self.predation * y - self.prey_growth * math.log(y))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_prey"] = list(self.initial_prey)
        d["initial_predator"] = list(self.initial_predator)
        return d


def predator_prey_schemas() -> list[VariableSchema]:
    return [VariableSchema(PREY, STATE, "thousands", "Prey population in thousands.", 3),
            VariableSchema(PREDATOR, STATE, "thousands", "Predator population in thousands.", 3)]


def gen_predator_prey(n: int, T: int, params: PredatorPreyParams | None = None,
                      seed: int | None = None, initial: tuple[float, float] | None = None,
                      round_states: bool = True) -> list[Trajectory]:
    """Euler-discretized Lotka-Volterra with multiplicative noise, no actions.

    Each recorded step advances ``substeps`` Euler steps of size ``dt``.
    Populations are clamped at zero.
    """
    p = params or PredatorPreyParams()
    if T < 1 or n < 0:
        raise ValueError("need T >= 1 and n >= 0")
    seed = p.seed if seed is None else seed
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        if initial is not None:
            x, y = initial
        else:
            x = float(rng.uniform(*p.initial_prey))
            y = float(rng.uniform(*p.initial_predator))
        steps = []
        for t in range(T):
            state = {PREY: x, PREDATOR: y}
            if round_states:
                state = {k: _round(v, 3) for k, v in state.items()}
            steps.append(TimeStep(t, state, {}))
            for _ in range(p.substeps):
                dx = p.prey_growth * x - p.predation * x * y
                dy = p.predator_gain * x * y - p.predator_death * y
                x, y = x + p.dt * dx, y + p.dt * dy
            if p.noise:
                x *= math.exp(p.noise * rng.standard_normal())
                y *= math.exp(p.noise * rng.standard_normal())
            x, y = max(x, 0.0), max(y, 0.0)
        out.append(Trajectory(f"lv-{i:04d}", steps))
    return out


# -- events --------------------------------------------------------------------

def sphere_volume(diameter_cm: float) -> float:
    return 4.0 / 3.0 * math.pi * (diameter_cm / 2.0) ** 3


def death_time(traj: Trajectory, diameter_threshold_cm: float = DEATH_DIAMETER_CM,
               variable: str = VOLUME):
    """First time the tumour volume reaches the sphere volume of the threshold diameter."""
    limit = sphere_volume(diameter_threshold_cm)
    for step in traj.steps:
        if step.state[variable] >= limit:
            return step.time
    return None


# -- environment-change scenario ----------------------------------------------

NEW_DRUG = "drug_x"
NEW_DRUG_TEXT = ("A treatment that clinical trial results suggest can initially improve "
                 "{variable} by {amount} points")


@dataclass
class NewActionScenario:
    base: ModellingEnvironment
    variants: dict[str, ModellingEnvironment]
    histories: list[Trajectory]
    truths: list[Trajectory]
    params: PkPdParams
    effect: float


def _treated_trajectory(traj_id: str, rng, params: PkPdParams, effect: float, pre_steps: int,
                        post_steps: int, chemo_prob: float, radio_prob: float) -> Trajectory:
    """Random-schedule patient who starts the new drug at step ``pre_steps - 1``."""
    lo, hi = params.initial_volume
    volume, conc = float(rng.uniform(lo, hi)), 0.0
    steps = []
    for t in range(pre_steps + post_steps):
        dc = CHEMO_DOSES[1] if rng.random() < chemo_prob else 0.0
        dr = RADIO_DOSES[1] if rng.random() < radio_prob else 0.0
        drug = 1.0 if t >= pre_steps - 1 else 0.0
        steps.append(TimeStep(t, {VOLUME: _round(volume), CONCENTRATION: _round(conc)},
                              {CHEMO: dc, RADIO: dr, NEW_DRUG: drug}))
        volume, conc = pkpd_step(volume, conc, dc, dr, params, float(rng.standard_normal()),
                                 extra_kill=effect * drug)
    return Trajectory(traj_id, steps)


def scenario_new_action(params: PkPdParams | None = None, effect: float = 0.3, n_base: int = 200,
                        n_added: int = 60, n_test: int = 20, history_len: int = 3,
                        horizon: int = 3, seed: int = 0, chemo_prob: float = 0.3,
                        radio_prob: float = 0.3) -> NewActionScenario:
    """Environments before and after a new binary treatment becomes available.

    Variants: ``"A"`` adds only the action schema, ``"A+K"`` also a knowledge
    entry describing the effect, ``"A+K+D"`` also treated samples with one
    post-treatment measurement. Test patients start the drug on the last
    history step and stay on it for the horizon.
    """
    params = params or PkPdParams(noise=0.02)
    ss = np.random.SeedSequence(seed)
    base_seed, added_ss, test_ss = ss.spawn(3)
    base_data = gen_pkpd(n_base, history_len + horizon, params, "random",
                         seed=int(base_seed.generate_state(1)[0]),
                         policy_options={"chemo_prob": chemo_prob, "radio_prob": radio_prob})
    base = pkpd_environment(base_data)
    new_schema = VariableSchema(NEW_DRUG, ACTION, "", "", 0, render_as_flag=False, bins=(0.0, 1.0))
    a_only = base.update(add_schemas=[new_schema])
    shrink = 100.0 * (1.0 - math.exp(-effect))
    entry = KnowledgeEntry(NEW_DRUG, NEW_DRUG_TEXT.format(variable=VOLUME, amount=f"{shrink:.1f}")
                           .replace("improve", "reduce"))
    a_k = a_only.update(add_knowledge=[entry])
    rng = np.random.default_rng(added_ss)
    added = [_treated_trajectory(f"treated-{i:04d}", rng, params, effect, history_len, 1,
                                 chemo_prob, radio_prob) for i in range(n_added)]
    a_k_d = a_k.update(add_trajectories=added)
    rng = np.random.default_rng(test_ss)
    tests = [_treated_trajectory(f"test-{i:04d}", rng, params, effect, history_len, horizon,
                                 chemo_prob, radio_prob) for i in range(n_test)]
    return NewActionScenario(
        base=base, variants={"A": a_only, "A+K": a_k, "A+K+D": a_k_d},
        histories=[t[:history_len] for t in tests], truths=[t[history_len:] for t in tests],
        params=params, effect=effect)


# -- two-regime cohort ---------------------------------------------------------

REGIME_PARAMS = (
    PkPdParams(growth_rate=0.03, chemo_kill=0.001, radio_alpha=0.005, radio_beta=0.0,
               noise=0.01),  # treatment resistant
    PkPdParams(growth_rate=0.03, chemo_kill=0.03, radio_alpha=0.1, radio_beta=0.01,
               noise=0.01),  # treatment sensitive
)


def gen_two_regime(n_per_regime: int, T: int, seed: int = 0,
                   regimes: Sequence[PkPdParams] = REGIME_PARAMS,
                   dose_prob: float = 0.5) -> tuple[list[Trajectory], list[int]]:
    """Patients from parameter clusters that share one treatment schedule distribution.

    Doses are drawn with the same probabilities in every cluster, so only the
    state response tells the clusters apart. Returns trajectories and the
    cluster label of each.
    """
    trajs, labels = [], []
    children = np.random.SeedSequence(seed).spawn(len(regimes))
    for k, (params, child) in enumerate(zip(regimes, children)):
        batch = gen_pkpd(n_per_regime, T, params, "random", seed=int(child.generate_state(1)[0]),
                         policy_options={"chemo_prob": dose_prob, "radio_prob": dose_prob},
                         id_prefix=f"regime{k}")
        trajs.extend(batch)
        labels.extend([k] * len(batch))
    return trajs, labels
