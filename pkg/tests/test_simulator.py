import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calm_twin.codec import parse_steps
from calm_twin.core import (ACTION, STATE, KnowledgeEntry, ModellingEnvironment, SimulationConfig,
                            VariableSchema)
from calm_twin.encoder import BiEncoderRetriever
from calm_twin.llm import GroundTruthOracle, NearestContextMock, ScriptedBackend, parse_prompt
from calm_twin.llm.backends import LlmSelectorMock
from calm_twin.simulator import (CalmDT, ConstantPolicy, RepeatLastPolicy, ReplayPolicy,
                                 SimulationResult, ThresholdPolicy, simulate,
                                 simulate_ensemble_stats)
from conftest import make_traj

SCHEMAS = (VariableSchema("x", STATE, decimals=1), VariableSchema("z", ACTION, decimals=0))


def _traj(tid, xs, zs):
    return make_traj(tid, [{"x": float(v)} for v in xs], [{"z": float(a)} for a in zs])


@pytest.fixture(scope="module")
def env():
    rng = np.random.default_rng(0)
    data = [_traj(f"d{i}", np.round(rng.uniform(0, 10, 12), 1), rng.integers(0, 2, 12))
            for i in range(30)]
    return ModellingEnvironment(SCHEMAS, tuple(data), (KnowledgeEntry("x", "a level"),))


@pytest.fixture(scope="module")
def retriever():
    return BiEncoderRetriever(dimension=16, n_features=256).initialize()


def echo_backend():
    """Replies with last state + 1, recording prompts."""
    def reply(bundle):
        steps, _ = parse_steps(parse_prompt(bundle.user_text).target_states)
        t, vals = steps[-1]
        return f"Time {t + 1}: x: {vals['x'] + 1:.1f}"
    return ScriptedBackend(reply)


H0 = _traj("h", [1.0, 2.0, 3.0], [0, 0, 0])


def test_oracle_closure(env, retriever):
    truth = _traj("t", [float(i) / 2 for i in range(10)], [0] * 10)
    cfg = SimulationConfig(3, 3, 1, 7)
    res = simulate(env, truth[:3], ReplayPolicy.from_trajectory(truth[3:]), cfg,
                   GroundTruthOracle([truth], SCHEMAS), retriever)
    assert [s.state for s in res.runs[0].steps] == [s.state for s in truth[3:].steps]
    assert res.runs[0].times == truth[3:].times


@pytest.mark.parametrize("r, F, steps", [(1, 3, [0, 1, 2]), (3, 7, [0, 3, 6]), (2, 5, [0, 2, 4]),
                                         (10, 4, [0])])
def test_retrieval_schedule(env, retriever, r, F, steps):
    res = simulate(env, H0, ConstantPolicy({"z": 0}), SimulationConfig(3, 3, r, F),
                   echo_backend(), retriever)
    assert res.retrieval_steps() == steps
    assert len(steps) == math.ceil(F / r)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9))
def test_retrieval_count_law(r, F):
    env = ModellingEnvironment(SCHEMAS, (_traj("d", range(6), [0] * 6),))
    res = simulate(env, H0, ConstantPolicy({"z": 0}), SimulationConfig(2, 3, r, F),
                   echo_backend(), mode="random")
    assert res.diagnostics["retrieval_count"] == [math.ceil(F / r)]


def test_new_action_forces_retrieval(env, retriever):
    policy = ReplayPolicy([{"z": 0}, {"z": 0}, {"z": 1}, {"z": 1}, {"z": 1}, {"z": 1}])
    res = simulate(env, H0, policy, SimulationConfig(3, 3, 10, 6), echo_backend(), retriever)
    # the unseen action is drawn at step 2, so the next generation re-retrieves
    assert res.retrieval_steps() == [0, 3]


def test_rolling_window_and_provenance(env, retriever):
    backend = echo_backend()
    h0 = _traj("h", [0.5, 1.0, 2.0, 3.0, 4.0], [0] * 5)
    res = simulate(env, h0, RepeatLastPolicy(), SimulationConfig(3, 3, 2, 5), backend, retriever)
    for f, bundle in enumerate(backend.bundles):
        steps, _ = parse_steps(parse_prompt(bundle.user_text).target_states)
        assert [t for t, _ in steps] == list(range(2 + f, 5 + f))
    assert [s.state["x"] for s in res.runs[0].steps] == [5.0, 6.0, 7.0, 8.0, 9.0]
    events = {ev["index"] for ev in res.retrievals[0]}
    assert [p["step"] for p in res.provenance[0]] == list(range(5))
    assert all(p["retrieval_index"] in events for p in res.provenance[0])
    assert all(len(p["context_ids"]) == 3 for p in res.provenance[0])
    assert res.provenance[0][0]["knowledge_keys"] == ["x"]


def test_regeneration_then_success(env, retriever):
    replies = iter(["garbage", "**Time 3:** x: 7.0"])
    backend = ScriptedBackend(lambda b: next(replies))
    res = simulate(env, H0, RepeatLastPolicy(), SimulationConfig(3, 3, 1, 1), backend, retriever)
    assert res.runs[0].steps[0].state == {"x": 7.0}
    assert res.diagnostics["parse_retries"] == 1
    assert res.diagnostics["stripped_characters"] > 0
    assert backend.bundles[1].user_text.endswith("Respond with exactly one line: Time <t>: ...")


def test_abort_after_three_regenerations(env, retriever):
    backend = ScriptedBackend(lambda b: "no idea")
    res = simulate(env, H0, RepeatLastPolicy(), SimulationConfig(3, 3, 1, 2, ensemble=2), backend,
                   retriever)
    assert res.runs == [None, None]
    assert res.diagnostics["aborted_members"] == [0, 1]
    assert len(backend.bundles) == 8  # 1 + 3 regenerations per member
    assert "errors" in res.diagnostics


def test_partial_run_kept_on_late_abort(env, retriever):
    calls = iter(["Time 3: x: 1.0"] + ["bad"] * 4)
    res = simulate(env, H0, RepeatLastPolicy(), SimulationConfig(3, 3, 1, 3),
                   ScriptedBackend(lambda b: next(calls)), retriever)
    assert len(res.runs[0]) == 1 and res.diagnostics["aborted_members"] == [0]


@pytest.mark.parametrize("mode", ["random", "full", "zero-shot", "llm", "encoder-no-ft"])
def test_modes_run(env, retriever, mode):
    res = simulate(env, H0, RepeatLastPolicy(), SimulationConfig(3, 3, 1, 2), echo_backend(),
                   retriever, mode=mode, selector=LlmSelectorMock())
    ids = res.retrievals[0][0]["context_ids"]
    expected = {"zero-shot": 0, "full": 30}.get(mode, 3)
    assert len(res.runs[0]) == 2 and len(ids) == expected


def test_input_validation(env, retriever):
    with pytest.raises(ValueError):
        simulate(env, H0[:2], RepeatLastPolicy(), SimulationConfig(), echo_backend(), retriever)
    with pytest.raises(ValueError):
        simulate(env, H0, RepeatLastPolicy(), SimulationConfig(), echo_backend(), mode="bogus")
    with pytest.raises(ValueError):
        simulate(env, H0, RepeatLastPolicy(), SimulationConfig(), echo_backend(), None)
    with pytest.raises(ValueError):
        simulate(env, H0, ConstantPolicy({"q": 1}), SimulationConfig(0, 3, 1, 1), echo_backend(),
                 mode="zero-shot")


def test_deterministic_and_threaded_equal(env, retriever):
    cfg = SimulationConfig(3, 3, 1, 3, ensemble=3, temperature=1.0)
    backend = NearestContextMock(noise=0.1)
    a = simulate(env, H0, RepeatLastPolicy(), cfg, backend, retriever, mode="random", seed=5)
    b = simulate(env, H0, RepeatLastPolicy(), cfg, backend, retriever, mode="random", seed=5,
                 jobs=3)
    assert a.to_json() == b.to_json()


def test_policies():
    h = _traj("h", [1, 2], [0, 1])
    assert RepeatLastPolicy()(h, {"x": 0}, 0) == {"z": 1.0}
    tp = ThresholdPolicy("x", 5.0, {"z": 1}, {"z": 0})
    assert tp(h, {"x": 5.0}, 0) == {"z": 1} and tp(h, {"x": 4.9}, 0) == {"z": 0}
    with pytest.raises(IndexError):
        ReplayPolicy([{"z": 0}])(h, {}, 1)


def _result(values):
    runs = [_traj(f"r{i}", v, [0] * len(v)) for i, v in enumerate(values)]
    return SimulationResult(runs, [[]] * len(runs), [[]] * len(runs))


def test_ensemble_stats():
    one = simulate_ensemble_stats(_result([[1.0, 2.0]]))
    assert one["x"]["mean"].tolist() == [1.0, 2.0]
    two = simulate_ensemble_stats(_result([[0.0, 2.0], [4.0, 6.0]]), quantiles=(0.0, 1.0))
    assert two["x"]["mean"].tolist() == [2.0, 4.0]
    assert two["x"]["quantiles"][0.0].tolist() == [0.0, 2.0]
    assert two["x"]["quantiles"][1.0].tolist() == [4.0, 6.0]
    with pytest.raises(ValueError):
        simulate_ensemble_stats(SimulationResult([None], [[]], [[]]))


def test_environment_change_keeps_encoder(env, tmp_path):
    est = BiEncoderRetriever(dimension=16, n_features=256).initialize()
    est.save(tmp_path / "enc.ckpt")
    digest = est.digest()
    model = CalmDT(context_size=3, horizon=3, backend=NearestContextMock(), retriever=est).fit(env)
    model.simulate(H0)
    extended = [make_traj(f"n{i}", [{"x": float(j), "y": float(i + j)} for j in range(6)],
                          [{"z": float(j % 2)} for j in range(6)]) for i in range(5)]
    model.update_environment({"add_schemas": [VariableSchema("y", STATE, decimals=1)],
                              "add_trajectories": extended})
    assert model.env_.epoch == 1
    h = make_traj("h2", [{"x": 1.0, "y": 2.0}, {"x": 2.0, "y": 3.0}, {"x": 3.0, "y": 4.0}],
                  [{"z": 0.0}] * 3)
    res = model.simulate(h)
    assert len(res.runs[0]) == 3 and set(res.runs[0].state_names) == {"x", "y"}
    assert est.digest() == digest == BiEncoderRetriever.load(tmp_path / "enc.ckpt").digest()


def test_calmdt_estimator(env):
    from sklearn.exceptions import NotFittedError
    model = CalmDT(context_size=2, horizon=2, mode="random", backend=NearestContextMock())
    with pytest.raises(NotFittedError):
        model.predict(H0)
    out = model.fit(env).predict([H0, H0])
    assert len(out) == 2 and all(len(r.runs[0]) == 2 for r in out)
    assert model.get_params()["context_size"] == 2
    with pytest.raises(ValueError):
        CalmDT().fit(env)
