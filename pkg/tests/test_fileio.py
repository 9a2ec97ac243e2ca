import json

import numpy as np
import pytest

from ppvar.conjugate import BernoulliFixedBackend, NormalKnownVarBackend
from ppvar.cscope import enumerate_plans
from ppvar.decomp import decompose_exact
from ppvar.fileio import (
    BUNDLED_DISCRETE,
    BUNDLED_MODELS,
    SpecError,
    bundled_path,
    fmt,
    load_dataset,
    load_model_spec,
    parse_dataset,
    parse_model_spec,
    write_manifest,
    write_result,
)
from ppvar.hierarchy import Dataset, joint_posterior

TOY = """{
  "factors": [{"name": "model", "levels": ["a", "b"]}],
  "backend": {"family": "bernoulli-fixed"},
  "components": [
    {"levels": ["a"], "params": {"p": 0.2}},
    {"levels": ["b"], "params": {"p": 0.6}}
  ]
}"""


def test_parse_toy_spec():
    model = parse_model_spec(TOY)
    assert model.K == 1
    assert isinstance(model.components[("a",)], BernoulliFixedBackend)
    assert model.components[("b",)].p == 0.6


def test_parameter_layer_spec():
    model = parse_model_spec(json.dumps({
        "factors": [],
        "backend": {"family": "normal-known-var", "params": {"sigma": 2.0}},
        "parameter": "theta",
    }))
    assert model.K == 1 and model.parameter_index == 1
    assert isinstance(model.components[()], NormalKnownVarBackend)


def test_conditional_prior_rows():
    model = load_model_spec(bundled_path("two_factor"))
    prior = np.exp(model.log_prior())
    assert prior.sum() == pytest.approx(1.0)
    assert prior[1, 2] == pytest.approx(0.3 * 0.6)


@pytest.mark.parametrize("name", BUNDLED_MODELS)
def test_bundled_models_load_and_conserve(name):
    model = load_model_spec(bundled_path(name))
    data = Dataset.empty()
    post = joint_posterior(model, data)
    for plan in enumerate_plans(model.K):
        if model.parameter_index is not None and model.parameter_index not in plan.blocks[-1]:
            continue
        assert decompose_exact(model, data, post, plan).conserved()
    assert (name in BUNDLED_DISCRETE) == (model.parameter is None)


def line_of(text, needle):
    return next(i + 1 for i, line in enumerate(text.splitlines()) if needle in line)


@pytest.mark.parametrize(
    "edit, needle, fragment",
    [
        (lambda s: s.replace('"p": 0.6', '"p": 1.6'), '"p": 1.6', "components[1].params"),
        (lambda s: s.replace('"p": 0.6', '"p": "high"'), '"p": "high"', "p must be a number"),
        (lambda s: s.replace('["b"], "params"', '["c"], "params"'), '["c"]', "not a level"),
        (lambda s: s.replace("bernoulli-fixed", "poisson"), "poisson", "unknown family"),
        (lambda s: s.replace('{"p": 0.2}', '{"q": 0.2}'), '"q": 0.2', "unknown bernoulli-fixed field"),
    ],
)
def test_spec_errors_carry_line_and_path(edit, needle, fragment):
    text = edit(TOY)
    with pytest.raises(SpecError) as info:
        parse_model_spec(text, "toy.json")
    err = info.value
    assert fragment in str(err)
    assert err.line == line_of(text, needle)
    assert str(err).startswith(f"toy.json:{err.line}:")


def test_spec_missing_field_and_bad_json():
    with pytest.raises(SpecError, match="missing required field 'factors'"):
        parse_model_spec('{"backend": {"family": "bernoulli-fixed"}}')
    with pytest.raises(SpecError) as info:
        parse_model_spec('{\n  "factors": [,\n}', "bad.json")
    assert info.value.line == 2
    with pytest.raises(SpecError, match="unknown field"):
        parse_model_spec('{"factors": [], "extra": 1, "backend": {"family": "bernoulli-fixed"}}')


def test_spec_prior_must_normalize():
    text = TOY.replace('"levels": ["a", "b"]}', '"levels": ["a", "b"], "prior": [0.3, 0.3]}')
    with pytest.raises(SpecError) as info:
        parse_model_spec(text, "p.json")
    assert info.value.line == 2


def test_parameter_on_family_without_one():
    with pytest.raises(SpecError, match="no parameter layer"):
        parse_model_spec(TOY.replace('"factors"', '"parameter": "theta", "factors"'))


def test_dataset_parsing():
    d = parse_dataset("y,t\n1,70\n0,65\n\n2,80\n")
    assert d.responses.tolist() == [1, 0, 2]
    assert d.column("t").tolist() == [70, 65, 80]


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("t\n1\n", 1, "no 'y' column"),
        ("y,t\n1,2\n3\n", 3, "expected 2 fields"),
        ("y,t\n1,2\n3,abc\n", 3, "t: not a number"),
        ("y\n1\nnan\n", 3, "non-finite"),
        ("", 1, "empty data file"),
    ],
)
def test_dataset_errors(text, line, fragment):
    with pytest.raises(SpecError) as info:
        parse_dataset(text, "d.csv")
    assert info.value.line == line
    assert fragment in str(info.value)


def test_missing_files(tmp_path):
    with pytest.raises(SpecError, match="cannot read"):
        load_model_spec(tmp_path / "nope.json")
    with pytest.raises(SpecError, match="cannot read"):
        load_dataset(tmp_path / "nope.csv")


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, 2.0**60):
        assert float(fmt(x)) == x
    assert fmt(None) == "" and fmt(True) == "true" and fmt(np.int64(3)) == "3"


def test_result_files_and_manifest(tmp_path, monkeypatch, bernoulli_toy):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    model, data = bernoulli_toy
    from ppvar.cscope import parse_plan

    res = decompose_exact(model, data, joint_posterior(model, data), parse_plan("1", 1))
    paths = write_result(res, tmp_path)
    doc = json.loads((tmp_path / "result.json").read_text())
    assert doc["conserved"] is True
    assert [t["value"] for t in doc["terms"]] == pytest.approx([0.2, 0.04])
    inp = tmp_path / "in.json"
    inp.write_text(TOY)
    write_manifest(tmp_path, "decompose", {"plan": "1"}, 7, paths, {"model": str(inp)})
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["created_at"] == "1970-01-01T00:00:00+00:00"
    assert man["outputs"] == ["result.csv", "result.json"]
    assert man["seed"] == 7
    assert len(man["inputs"]["model"]["sha256"]) == 64
    header = (tmp_path / "result.csv").read_text().splitlines()[0]
    assert header == "plan,term_label,value,std_error,proportion,engine,seed"


def test_unknown_bundled_name():
    with pytest.raises(KeyError):
        bundled_path("nope")
