"""Model specifications: a JSON document validated against a bundled schema.

A minimal document is ``{"terms": [{"kind": "intercept_t"}]}``. Unset basis
settings fall back to ``basis_defaults`` and then to the library defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from .errors import ConflictError, ParseError
from .terms import RANDOM_KINDS, TERM_KINDS, TermSpec

_TERM_KEYS = [f.name for f in fields(TermSpec)]


@dataclass
class FpcOptions:
    threshold: Optional[float] = 0.995
    n_components: Optional[int] = None
    repeats: int = 1
    # share of raw group-mean variance the smoothed covariance must keep
    min_variance_share: float = 0.05


@dataclass
class OptimizerOptions:
    n_starts: int = 5
    max_iter: Optional[int] = None
    seed: int = 0


@dataclass
class ModelSpec:
    terms: list
    data: dict = field(default_factory=dict)
    basis_defaults: dict = field(default_factory=dict)
    center_functional: bool = True
    constrain_random_effects: bool = False
    fpc: FpcOptions = field(default_factory=FpcOptions)
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    outputs: dict = field(default_factory=dict)

    def term_specs(self):
        """Term specs with basis defaults and constraint policy applied."""
        out = []
        for t in self.terms:
            t = replace(t)
            d = self.basis_defaults
            if t.k_t is None:
                t.k_t = d.get("k_t_intercept") if t.kind == "intercept_t" else d.get("k_t")
            for key in ("k_x", "k_s", "order_x"):
                if getattr(t, key) is None and key in d:
                    setattr(t, key, d[key])
            if t.constrained is None and t.kind in RANDOM_KINDS and self.constrain_random_effects:
                t.constrained = True
            out.append(t.resolved())
        return out

    def without(self, kinds):
        return replace(self, terms=[t for t in self.terms if t.kind not in kinds])


def schema():
    text = resources.files("famm").joinpath("schemas/model_spec.schema.json").read_text()
    return json.loads(text)


def _location(err):
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def parse_model_spec(text) -> ModelSpec:
    """Parse and validate a JSON model specification.

    Raises :class:`ParseError` (with a location) for malformed documents,
    unknown keys or unknown term kinds, and :class:`ConflictError` for
    contradictory options. Covariate names are not checked here.
    """
    if isinstance(text, (bytes, str)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", f"line {e.lineno}, column {e.colno}") from None
    else:
        doc = text
    if not isinstance(doc, dict):
        raise ParseError("model specification must be a JSON object", "<root>")
    for i, term in enumerate(doc.get("terms", []) or []):
        if isinstance(term, dict) and "kind" in term and term["kind"] not in TERM_KINDS:
            raise ParseError(f"unknown term kind {term['kind']!r}", f"terms/{i}/kind")
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ParseError(e.message, _location(e))

    defaults = dict(doc.get("basis_defaults", {}))
    terms = []
    labels = set()
    for i, tdoc in enumerate(doc["terms"]):
        kw = {k: v for k, v in tdoc.items() if v is not None}
        for key in ("order_s", "order_t"):
            if key not in kw and key in defaults:
                kw[key] = defaults[key]
        if "precision" in kw:
            kw["precision"] = np.asarray(kw["precision"], dtype=float)
        _check_term_conflicts(kw, i)
        try:
            spec = TermSpec(**kw)
        except Exception as e:
            raise ParseError(str(e), f"terms/{i}") from None
        label = replace(spec).resolved().label if spec.label is None else spec.label
        if label in labels:
            raise ConflictError(f"duplicate term label {label!r} at terms/{i}")
        labels.add(label)
        terms.append(spec)

    fpc_doc = doc.get("fpc", {})
    if fpc_doc.get("n_components") is not None and fpc_doc.get("threshold") is not None:
        raise ConflictError("fpc: give either threshold or n_components, not both")
    fpc = FpcOptions(**fpc_doc)
    if fpc.n_components is not None:
        fpc.threshold = None
    cons = doc.get("constraints", {})
    return ModelSpec(
        terms=terms,
        data=dict(doc.get("data", {})),
        basis_defaults=defaults,
        center_functional=cons.get("center_functional", True),
        constrain_random_effects=cons.get("random_effects", False),
        fpc=fpc,
        optimizer=OptimizerOptions(**doc.get("optimizer", {})),
        outputs=dict(doc.get("outputs", {})),
    )


def _check_term_conflicts(kw, i):
    kind = kw["kind"]
    where = f"terms/{i}"
    if kw.get("limits", "full") != "full" and kind != "functional_linear":
        raise ConflictError(f"{where}: integration limits only apply to functional_linear terms")
    if kw.get("constant_over_t") and kind in (
        "intercept_t", "scalar_linear_t", "scalar_smooth_t", "varying_coef_t",
        "functional_linear", "functional_smooth", "random_intercept", "random_slope",
        "fpc_random_intercept", "ffpc_linear", "ffpc_smooth",
    ):
        raise ConflictError(f"{where}: constant_over_t contradicts kind {kind!r}")
    if "precision" in kw and kind not in ("random_intercept", "random_slope"):
        raise ConflictError(f"{where}: precision only applies to spline random effects")
    if kw.get("constrained") and kind.startswith("intercept"):
        raise ConflictError(f"{where}: intercepts cannot be constrained")
    if kw.get("n_components") is not None and kind not in ("ffpc_linear", "ffpc_smooth", "fpc_random_intercept"):
        raise ConflictError(f"{where}: n_components only applies to FPC-based terms")


def _term_doc(t: TermSpec):
    out = {}
    for k in _TERM_KEYS:
        v = getattr(t, k)
        if isinstance(v, np.ndarray):
            v = v.tolist()
        out[k] = v
    return out


def serialize_model_spec(spec: ModelSpec) -> str:
    """Canonical JSON form: all term defaults resolved, keys sorted."""
    doc = {
        "terms": [_term_doc(t) for t in spec.term_specs()],
        "basis_defaults": spec.basis_defaults,
        "constraints": {
            "center_functional": spec.center_functional,
            "random_effects": spec.constrain_random_effects,
        },
        "fpc": {
            "threshold": spec.fpc.threshold,
            "n_components": spec.fpc.n_components,
            "repeats": spec.fpc.repeats,
            "min_variance_share": spec.fpc.min_variance_share,
        },
        "optimizer": {
            "n_starts": spec.optimizer.n_starts,
            "max_iter": spec.optimizer.max_iter,
            "seed": spec.optimizer.seed,
        },
    }
    if spec.data:
        doc["data"] = spec.data
    if spec.outputs:
        doc["outputs"] = spec.outputs
    return json.dumps(doc, sort_keys=True, indent=2)


def spec_hash(spec: ModelSpec) -> str:
    return hashlib.sha256(serialize_model_spec(spec).encode()).hexdigest()


def load_model_spec(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_model_spec(fh.read())
