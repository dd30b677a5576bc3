import pytest

from calm_twin.core import (ACTION, GENERAL, STATE, KnowledgeEntry, ModellingEnvironment,
                            TimeStep, Trajectory, VariableSchema)


def make_traj(tid, states, actions=None, times=None):
    """Trajectory from per-step state dicts (and optional action dicts)."""
    times = list(range(len(states))) if times is None else times
    actions = actions if actions is not None else [{} for _ in states]
    return Trajectory(tid, [TimeStep(t, s, a) for t, s, a in zip(times, states, actions)])


def action_traj(tid, actions, name="z"):
    """Single-state trajectory whose only interesting content is the action sequence."""
    return make_traj(tid, [{"x": float(i)} for i in range(len(actions))],
                     [{name: float(a)} for a in actions])


@pytest.fixture
def cf_schemas():
    return [
        VariableSchema("FEV1PP", STATE, "%", "Forced expiratory volume in 1 second compared to "
                       "the standard for that age.", 1),
        VariableSchema("Weight", STATE, "kg", "Patient weight in kg.", 1),
        VariableSchema("Height", STATE, "cm", "Patient height in cm.", 0),
        VariableSchema("Dornase_Alfa", ACTION, "", "A treatment which can stabilise or slow the "
                       "decline of FEV1.", 0, render_as_flag=True, bins=(0, 1)),
    ]


@pytest.fixture
def cf_knowledge(cf_schemas):
    general = KnowledgeEntry(GENERAL, "The data is from a patient with cystic fibrosis. "
                                      "The time unit is in years.")
    return [general] + [KnowledgeEntry(s.name, s.description) for s in cf_schemas]


@pytest.fixture
def cf_example():
    """The in-context example and target of the reference CF prompt."""
    ex = make_traj("ex1", [
        {"FEV1PP": 80.1, "Weight": 65.0, "Height": 168},
        {"FEV1PP": 81.0, "Weight": 66.2, "Height": 168},
        {"FEV1PP": 74.2, "Weight": 63.5, "Height": 168},
        {"FEV1PP": 71.2, "Weight": 64.1, "Height": 168},
    ], [{"Dornase_Alfa": 1}] * 4, times=[2008, 2009, 2010, 2011])
    target = make_traj("target", [
        {"FEV1PP": 77.8, "Weight": 70.1, "Height": 174},
        {"FEV1PP": 80.1, "Weight": 69.8, "Height": 174},
        {"FEV1PP": 74.0, "Weight": 70.9, "Height": 174},
    ], [{"Dornase_Alfa": 1}] * 3, times=[2008, 2009, 2010])
    return ex, target


@pytest.fixture
def cf_env(cf_schemas, cf_knowledge, cf_example):
    return ModellingEnvironment(tuple(cf_schemas), (cf_example[0],), tuple(cf_knowledge))


CF_PROMPT = """The data is from a patient with cystic fibrosis. The time unit is in years.

STATE VARIABLES:
FEV1PP: Forced expiratory volume in 1 second compared to the standard for that age.
Weight: Patient weight in kg.
Height: Patient height in cm.

ACTION VARIABLES:
Dornase_Alfa: A treatment which can stabilise or slow the decline of FEV1.


Example 1 state history: 
Time 2008: FEV1PP: 80.1, Weight: 65.0, Height: 168 | Time 2009: FEV1PP: 81.0, Weight: 66.2, Height: 168 | Time 2010: FEV1PP: 74.2, Weight: 63.5, Height: 168

Example 1 action history: 
Time 2008: Dornase_Alfa | Time 2009: Dornase_Alfa | Time 2010: Dornase_Alfa

Example 1 state future:
Time 2011: FEV1PP: 71.2, Weight: 64.1, Height: 168

Given the following state history:
Time 2008: FEV1PP: 77.8, Weight: 70.1, Height: 174 | Time 2009: FEV1PP: 80.1, Weight: 69.8, Height: 174 | Time 2010: FEV1PP: 74.0, Weight: 70.9, Height: 174

And the following action history:
Time 2008: Dornase_Alfa | Time 2009: Dornase_Alfa | Time 2010: Dornase_Alfa

Simulate the next timestep's state, for all state variables. Follow the exact format of the state history."""  # noqa: E501, W291

CF_SYSTEM = ("You are an expert at simulating dynamical systems. Respond only with the simulation "
             "in the exact format requested. Do not use the characters * or - anywhere. Ensure "
             "that you simulate exactly the desired number of timesteps for each state variable.")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
