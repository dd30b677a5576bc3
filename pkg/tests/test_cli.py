import json

import pytest

from calm_twin.cli import build_parser, main, substream
from calm_twin.core import load_environment, read_jsonl
from calm_twin.encoder import BiEncoderRetriever


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def env_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("env")
    assert run("--seed", 1, "generate-data", "--n", 12, "--horizon", 8, "--out", d / "data.jsonl",
               "--env-out", d / "env.json") == 0
    return d / "env.json"


def test_generate_data_byte_stable(tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 3, "generate-data", "--n", 4, "--horizon", 6,
                   "--out", tmp_path / f"{name}.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    pa = json.loads((tmp_path / "a.jsonl.params.json").read_text())
    assert pa["params"]["version"] == "surrogate-1" and pa["n"] == 4
    assert "created" in json.loads((tmp_path / "a.jsonl.meta.json").read_text())
    run("--seed", 4, "generate-data", "--n", 4, "--horizon", 6, "--out", tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_generate_edge_cases(tmp_path, capsys):
    assert run("generate-data", "--n", 0, "--out", tmp_path / "e.jsonl") == 0
    assert (tmp_path / "e.jsonl").read_text() == ""
    assert run("generate-data", "--n", 1) == 2
    assert run("generate-data", "--n", 1, "--out", tmp_path / "x", "--bogus") == 2
    assert run("generate-data", "--kind", "predprey", "--n", 2, "--horizon", 5,
               "--out", tmp_path / "lv.jsonl") == 0
    assert len(read_jsonl(tmp_path / "lv.jsonl")) == 2


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, sp in sub.items():
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 5\n[generate-data]\nn = 3\nhorizon = 4\nout = "%s"\n'
                   % (tmp_path / "cfg.jsonl"))
    assert run("--config", cfg, "generate-data") == 0
    assert len(read_jsonl(tmp_path / "cfg.jsonl")) == 3
    assert run("--config", cfg, "generate-data", "--n", 2) == 0  # flag wins
    assert len(read_jsonl(tmp_path / "cfg.jsonl")) == 2
    params = json.loads((tmp_path / "cfg.jsonl.params.json").read_text())
    assert params["seed"] == 5 and params["horizon"] == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"generate-data": {"colour": "red"}}))
    assert run("--config", bad, "generate-data", "--out", tmp_path / "z") == 2


def test_substreams_independent():
    assert substream(0, "datagen") != substream(0, "sampling")
    assert substream(0, "datagen") == substream(0, "datagen")


def test_pipeline(env_file, tmp_path):
    d = tmp_path
    assert run("build-contrastive", "--env", env_file, "--B", 5, "--out", d / "x") == 2
    assert run("--seed", 2, "build-contrastive", "--env", env_file, "--llm", "analog", "--C", 3,
               "--B", 1, "--runs", 1, "--scorer", "mse", "--out", d / "cs.jsonl") == 0
    assert run("train-encoder", "--contrastive-set", d / "cs.jsonl", "--epochs", 0,
               "--out", d / "init.ckpt") == 0
    init = BiEncoderRetriever.load(d / "init.ckpt")
    assert init.digest() == BiEncoderRetriever().initialize().digest()
    if (d / "cs.jsonl").read_text().strip():
        assert run("train-encoder", "--contrastive-set", d / "cs.jsonl", "--epochs", 2,
                   "--out", d / "enc.ckpt") == 0
        assert len(json.loads((d / "enc.ckpt.loss.json").read_text())["loss_curve"]) == 2
    tid = load_environment(env_file).dataset[0].id
    for name in ("s1", "s2"):
        assert run("simulate", "--env", env_file, "--target-id", tid, "--backend", "oracle",
                   "--mode", "random", "--F", 3, "--out", d / f"{name}.json") == 0
    assert (d / "s1.json").read_bytes() == (d / "s2.json").read_bytes()
    result = json.loads((d / "s1.json").read_text())
    truth = load_environment(env_file).dataset[0].steps[-3:]
    assert [s["state"] for s in result["runs"][0]["steps"]] == [s.state for s in truth]
    assert run("simulate", "--env", env_file, "--target-id", tid, "--mode", "zero-shot",
               "--out", d / "zs.json") == 0
    assert json.loads((d / "zs.json").read_text())["retrievals"][0][0]["context_ids"] == []
    assert run("simulate", "--env", env_file, "--target-id", "nobody", "--out", d / "n") == 2


def test_evaluate(env_file, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"environment": str(env_file), "split": {"n_test": 2, "horizon": 2},
                                "methods": [{"name": "last", "kind": "constant"}]}))
    assert run("evaluate", "--spec", spec, "--out", tmp_path / "rep") == 0
    header = (tmp_path / "rep" / "report.csv").read_text().splitlines()[0]
    assert header == "method,metric,mean,ci95,n"
    spec.write_text(json.dumps({"environment": "missing.json",
                                "methods": [{"name": "last", "kind": "constant"}]}))
    assert run("evaluate", "--spec", spec, "--out", tmp_path / "rep2") == 2


def test_env_update_variants(env_file, tmp_path):
    base = load_environment(env_file)
    a = tmp_path / "a.json"
    assert run("env-update", "--env", env_file, "--add-action", "drug_x", "--binary",
               "--out", a, "--dataset-out", env_file.parent / "data.jsonl") == 0
    env_a = load_environment(a)
    assert "drug_x" in env_a.schema_map and env_a.knowledge == base.knowledge
    assert len(env_a.dataset) == len(base.dataset) and env_a.epoch == base.epoch + 1
    k = tmp_path / "k.json"
    k.write_text(json.dumps([{"key": "drug_x", "text": "Shrinks tumours."}]))
    ak = tmp_path / "ak.json"
    assert run("env-update", "--env", a, "--knowledge-file", k, "--out", ak,
               "--dataset-out", env_file.parent / "data.jsonl") == 0
    assert load_environment(ak).knowledge[-1].key == "drug_x"
    extra = tmp_path / "extra.jsonl"
    extra.write_text((env_file.parent / "data.jsonl").read_text().splitlines()[0]
                     .replace('"id": "pkpd-0000"', '"id": "added-0"') + "\n")
    akd = tmp_path / "akd.json"
    assert run("env-update", "--env", ak, "--data-file", extra, "--out", akd,
               "--dataset-out", tmp_path / "akd.jsonl") == 0
    assert len(load_environment(akd).dataset) == len(base.dataset) + 1
    assert run("env-update", "--env", a, "--add-action", "drug_x", "--out", tmp_path / "d") == 2
