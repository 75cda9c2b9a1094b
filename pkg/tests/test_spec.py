import json

import pytest
from hypothesis import given, strategies as st

from famm.errors import ConflictError, MissingCovariate, ParseError
from famm.solver import fit_model
from famm.spec import parse_model_spec, serialize_model_spec, spec_hash

from conftest import make_dataset


def test_minimal_spec_defaults():
    spec = parse_model_spec('{"terms": [{"kind": "intercept_t"}]}')
    (t,) = spec.term_specs()
    assert t.k_t == 20 and t.degree_t == 3 and t.order_t == 1
    assert spec.optimizer.n_starts == 5


def test_basis_defaults_apply():
    spec = parse_model_spec({"terms": [{"kind": "intercept_t"}, {"kind": "scalar_smooth_t", "covariate": "z"}],
                             "basis_defaults": {"k_t_intercept": 12, "k_t": 7, "k_x": 6}})
    a, b = spec.term_specs()
    assert a.k_t == 12
    assert (b.k_t, b.k_x) == (7, 6)


def test_absent_covariate_fails_at_fit_not_parse():
    spec = parse_model_spec({"terms": [{"kind": "intercept_t"}, {"kind": "scalar_linear_t", "covariate": "nope"}]})
    with pytest.raises(MissingCovariate):
        fit_model(make_dataset(), spec)


@pytest.mark.parametrize(
    "doc, where",
    [
        ('{"terms": [{"kind": "warp"}]}', "terms/0/kind"),
        ('{"terms": [{"kind": "intercept_t", "colour": 1}]}', "terms/0"),
        ('{"terms": [], "extra": 1}', "<root>"),
        ('{"terms": [{"kind": "intercept_t", "k_t": "ten"}]}', "terms/0/k_t"),
    ],
)
def test_parse_errors_carry_location(doc, where):
    with pytest.raises(ParseError) as info:
        parse_model_spec(doc)
    assert info.value.location == where


def test_invalid_json_location():
    with pytest.raises(ParseError) as info:
        parse_model_spec('{"terms": [\n  {"kind": }]}')
    assert "line 2" in info.value.location


@pytest.mark.parametrize(
    "doc",
    [
        {"terms": [{"kind": "scalar_linear_t", "covariate": "z", "limits": "historical"}]},
        {"terms": [{"kind": "intercept_t", "constant_over_t": True}]},
        {"terms": [{"kind": "intercept_t", "constrained": True}]},
        {"terms": [{"kind": "intercept_t"}, {"kind": "intercept_t"}]},
        {"terms": [{"kind": "intercept_t"}], "fpc": {"threshold": 0.9, "n_components": 2}},
        {"terms": [{"kind": "scalar_linear_t", "covariate": "z", "n_components": 2}]},
    ],
)
def test_conflicts(doc):
    with pytest.raises(ConflictError):
        parse_model_spec(doc)


TERM_DOCS = [
    {"kind": "intercept_t"},
    {"kind": "intercept_const"},
    {"kind": "scalar_linear_t", "covariate": "z"},
    {"kind": "scalar_smooth_t", "covariate": "z", "k_x": 6},
    {"kind": "functional_linear", "covariate": "x", "limits": "historical"},
    {"kind": "functional_linear", "covariate": "x", "label": "fl2", "k_s": 7},
    {"kind": "random_intercept", "group": "g", "constrained": True},
    {"kind": "random_slope", "group": "g", "covariate": "z"},
    {"kind": "ffpc_linear", "covariate": "x", "n_components": 3},
]


@given(st.lists(st.sampled_from(range(1, len(TERM_DOCS))), unique=True, max_size=5),
       st.booleans(), st.integers(0, 99))
def test_serialize_round_trip(idx, center, seed):
    doc = {
        "terms": [TERM_DOCS[0]] + [TERM_DOCS[i] for i in idx],
        "constraints": {"center_functional": center},
        "optimizer": {"seed": seed},
    }
    spec = parse_model_spec(json.dumps(doc))
    text = serialize_model_spec(spec)
    again = parse_model_spec(text)
    assert serialize_model_spec(again) == text
    assert spec_hash(again) == spec_hash(spec)
