"""Model-spec documents, dataset CSVs, result files and run manifests."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import math
import os
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .conjugate import (
    BernoulliFixedBackend,
    BetaBinomialBackend,
    BetaBinomialSpec,
    NormalInvGammaBackend,
    NormalInvGammaSpec,
    NormalKnownVarBackend,
    NormalKnownVarSpec,
)
from .decomp import DecompositionResult
from .hierarchy import Backend, Dataset, FactorSpec, HierarchicalModel


class SpecError(ValueError):
    """A malformed input document, located by file, line and path."""

    def __init__(self, source: str, line: int | None, path: str, message: str):
        where = f"{source}:{line}" if line is not None else source
        loc = f" {path}:" if path else ""
        super().__init__(f"{where}:{loc} {message}")
        self.source = source
        self.line = line
        self.path = path


# family name -> (spec class, backend class, has parameter layer, required fields)
FAMILIES: dict[str, tuple[Any, Any, bool, tuple[str, ...]]] = {
    "normal-known-var": (NormalKnownVarSpec, NormalKnownVarBackend, True, ("sigma",)),
    "normal-invgamma": (NormalInvGammaSpec, NormalInvGammaBackend, True, ("alpha", "beta")),
    "beta-binomial": (BetaBinomialSpec, BetaBinomialBackend, True, ("m",)),
    "bernoulli-fixed": (None, BernoulliFixedBackend, False, ("p",)),
}
FAMILY_FIELDS = {
    "normal-known-var": ("sigma", "theta0", "tau0"),
    "normal-invgamma": ("alpha", "beta", "mu0", "kappa0"),
    "beta-binomial": ("m", "a", "b"),
    "bernoulli-fixed": ("p",),
}


class _Locator:
    """Maps a JSON path to the 1-based line where that value starts."""

    def __init__(self, text: str):
        try:
            self.root = yaml.compose(text)
        except yaml.YAMLError:
            self.root = None

    def line(self, path: tuple) -> int | None:
        node = self.root
        if node is None:
            return None
        best = node.start_mark.line + 1
        for key in path:
            nxt = None
            if isinstance(node, yaml.MappingNode):
                for k, v in node.value:
                    if k.value == key:
                        nxt = v
                        break
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                nxt = node.value[key]
            if nxt is None:
                break
            node = nxt
            best = node.start_mark.line + 1
        return best


def _path_text(path: tuple) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


class _Doc:
    def __init__(self, source: str, text: str):
        self.source = source
        self.locator = _Locator(text)

    def fail(self, path: tuple, message: str):
        raise SpecError(self.source, self.locator.line(path), _path_text(path), message)

    def get(self, obj: dict, key: str, path: tuple, kind=None, required=True, default=None):
        if key not in obj:
            if required:
                self.fail(path, f"missing required field {key!r}")
            return default
        value = obj[key]
        if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            self.fail(path + (key,), f"expected {names}, got {type(value).__name__}")
        return value


BUNDLED_MODELS = ("bernoulli_toy", "normal_normal", "two_factor", "three_factor")
BUNDLED_DISCRETE = ("bernoulli_toy", "two_factor", "three_factor")


def bundled_path(name: str) -> Path:
    """Path of a bundled model spec (``name``) or data file (``name.csv``)."""
    stem, _, ext = name.partition(".")
    if stem not in BUNDLED_MODELS and name not in ("normal_normal.csv", "bernoulli_data.csv"):
        raise KeyError(f"no bundled file {name!r}; models are {', '.join(BUNDLED_MODELS)}")
    filename = name if ext else f"{name}.json"
    return Path(str(resources.files("ppvar.data").joinpath("models", filename)))


def load_model_spec(path: str | os.PathLike) -> HierarchicalModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(str(path), None, "", f"cannot read model spec: {exc.strerror}") from exc
    return parse_model_spec(text, str(path))


def parse_model_spec(text: str, source: str = "<model>") -> HierarchicalModel:
    """Build a HierarchicalModel from a JSON model-spec document.

    Layout::

        {"factors": [{"name": "model", "levels": ["a", "b"],
                      "prior": "uniform" | [w...] | [{"given": [...], "weights": [...]}]}],
         "backend": {"family": "bernoulli-fixed", "params": {"p": 0.5}},
         "components": [{"levels": ["a"], "params": {"p": 0.2}}],
         "parameter": "theta"}

    ``components`` override the shared backend params per full assignment.
    ``parameter`` names the backend's parameter layer and makes it factor K.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(source, exc.lineno, "", f"invalid JSON: {exc.msg} (column {exc.colno})") from exc
    doc = _Doc(source, text)
    if not isinstance(obj, dict):
        doc.fail((), "top level must be a JSON object")
    known = {"factors", "backend", "components", "parameter", "description"}
    for key in obj:
        if key not in known:
            doc.fail((key,), f"unknown field {key!r}")

    raw_factors = doc.get(obj, "factors", (), list)
    factors = []
    for i, rf in enumerate(raw_factors):
        fp = ("factors", i)
        if not isinstance(rf, dict):
            doc.fail(fp, "factor must be an object")
        name = doc.get(rf, "name", fp, str)
        levels = doc.get(rf, "levels", fp, list)
        if not levels or not all(isinstance(x, (str, int)) and not isinstance(x, bool) for x in levels):
            doc.fail(fp + ("levels",), "levels must be a nonempty list of strings")
        levels = [str(x) for x in levels]
        prior = _parse_prior(doc, rf.get("prior", "uniform"), fp + ("prior",), levels)
        try:
            factors.append(FactorSpec(name, tuple(levels), prior))
        except ValueError as exc:
            doc.fail(fp, str(exc))

    parameter = doc.get(obj, "parameter", (), str, required=False)
    backend = doc.get(obj, "backend", (), dict)
    family = doc.get(backend, "family", ("backend",), str)
    if family not in FAMILIES:
        doc.fail(("backend", "family"), f"unknown family {family!r}; expected one of {sorted(FAMILIES)}")
    _, _, has_param, _ = FAMILIES[family]
    if parameter is not None and not has_param:
        doc.fail(("parameter",), f"family {family!r} has no parameter layer")
    shared = doc.get(backend, "params", ("backend",), dict, required=False, default={})

    overrides: dict[tuple[str, ...], tuple[dict, tuple]] = {}
    for i, rc in enumerate(doc.get(obj, "components", (), list, required=False, default=[])):
        cp = ("components", i)
        if not isinstance(rc, dict):
            doc.fail(cp, "component must be an object")
        lv = doc.get(rc, "levels", cp, list)
        key = tuple(str(x) for x in lv)
        if len(key) != len(factors):
            doc.fail(cp + ("levels",), f"expected {len(factors)} levels, got {len(key)}")
        for k, (f, x) in enumerate(zip(factors, key)):
            if x not in f.levels:
                doc.fail(cp + ("levels", k), f"{x!r} is not a level of factor {f.name!r}")
        if key in overrides:
            doc.fail(cp, f"duplicate component {list(key)!r}")
        overrides[key] = (doc.get(rc, "params", cp, dict), cp + ("params",))

    def make(levels: tuple[str, ...]) -> Backend:
        params = dict(shared)
        where = ("backend", "params")
        if levels in overrides:
            extra, where = overrides[levels]
            params.update(extra)
        return _make_backend(doc, family, params, where)

    try:
        return HierarchicalModel.build(factors, make, parameter)
    except SpecError:
        raise
    except ValueError as exc:
        doc.fail((), str(exc))


def _parse_prior(doc: _Doc, raw, path: tuple, levels: list[str]) -> dict:
    n = len(levels)
    if raw == "uniform":
        return {(): tuple([1.0 / n] * n)}
    if isinstance(raw, list) and all(_is_number(x) for x in raw):
        return {(): tuple(float(x) for x in raw)}
    if not isinstance(raw, list):
        doc.fail(path, 'prior must be "uniform", a weight list, or a list of {given, weights} rows')
    rows = {}
    for j, row in enumerate(raw):
        rp = path + (j,)
        if not isinstance(row, dict):
            doc.fail(rp, "prior row must be an object with 'given' and 'weights'")
        given = doc.get(row, "given", rp, list, required=False, default=[])
        weights = doc.get(row, "weights", rp, list)
        if not all(_is_number(x) for x in weights):
            doc.fail(rp + ("weights",), "weights must be numbers")
        rows[tuple(str(x) for x in given)] = tuple(float(x) for x in weights)
    return rows


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _make_backend(doc: _Doc, family: str, params: dict, where: tuple) -> Backend:
    spec_cls, backend_cls, _, required = FAMILIES[family]
    allowed = FAMILY_FIELDS[family]
    for key, value in params.items():
        if key not in allowed:
            doc.fail(where + (key,), f"unknown {family} field {key!r}; expected one of {list(allowed)}")
        if not _is_number(value):
            doc.fail(where + (key,), f"{key} must be a number")
    for key in required:
        if key not in params:
            doc.fail(where, f"{family} needs field {key!r}")
    if family == "beta-binomial":
        if params["m"] != int(params["m"]):
            doc.fail(where + ("m",), "m must be an integer")
        params = dict(params, m=int(params["m"]))
    try:
        if spec_cls is None:
            return backend_cls(**params)
        return backend_cls(spec_cls(**params))
    except (ValueError, TypeError) as exc:
        doc.fail(where, str(exc))


def load_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(str(path), None, "", f"cannot read data: {exc.strerror}") from exc
    return parse_dataset(text, str(path))


def parse_dataset(text: str, source: str = "<data>") -> Dataset:
    """CSV with a header; column "y" is the response, the rest are covariates."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SpecError(source, 1, "", "empty data file: a header row with a 'y' column is required")
    header = [h.strip() for h in header]
    if "y" not in header:
        raise SpecError(source, 1, "", f"no 'y' column in header {header!r}")
    if len(set(header)) != len(header):
        raise SpecError(source, 1, "", "duplicate column names")
    cols: dict[str, list[float]] = {h: [] for h in header}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SpecError(source, line, "", f"expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise SpecError(source, line, h, f"not a number: {cell.strip()!r}") from None
            if not math.isfinite(v):
                raise SpecError(source, line, h, f"non-finite value {cell.strip()!r}")
            cols[h].append(v)
    y = np.array(cols.pop("y"), dtype=float)
    return Dataset(y, {h: np.array(v) for h, v in cols.items()} or None)


# ---------------------------------------------------------------- results

RESULT_FIELDS = ("plan", "term_label", "value", "std_error", "proportion", "engine", "seed")


def fmt(x) -> str:
    """Shortest round-trip text for a float; integers and strings pass through."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def result_rows(result: DecompositionResult) -> list[dict]:
    rows = []
    for term, prop in zip(result.terms, result.proportions):
        rows.append({
            "plan": result.plan.text(),
            "term_label": term.label.pattern,
            "value": float(term.value),
            "std_error": float(term.std_error),
            "proportion": float(prop),
            "engine": result.engine,
            "seed": result.seed,
        })
    return rows


def write_csv(path: Path, fields, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([fmt(row[f]) for f in fields])
    path.write_text(buf.getvalue())
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_plain(obj), indent=2) + "\n")
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def result_document(result: DecompositionResult) -> dict:
    return {
        "plan": result.plan.text(),
        "engine": result.engine,
        "seed": result.seed,
        "factors": list(result.factor_names),
        "terms": result_rows(result),
        "total": result.total,
        "residual": result.residual,
        "residual_std_error": result.residual_se,
        "conserved": result.conserved(),
    }


def write_result(result: DecompositionResult, out_dir: Path, stem: str = "result") -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        write_csv(out_dir / f"{stem}.csv", RESULT_FIELDS, result_rows(result)),
        write_json(out_dir / f"{stem}.json", result_document(result)),
    ]


# ---------------------------------------------------------------- manifest


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc)
    else:
        moment = dt.datetime.now(dt.timezone.utc)
    return moment.replace(microsecond=0).isoformat()


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                   outputs: list[Path], inputs: dict[str, str] | None = None,
                   summary: dict | None = None) -> Path:
    """One manifest per run. Output paths are relative to ``out_dir``.

    The timestamp honours SOURCE_DATE_EPOCH so reruns can be byte-identical.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "artifact_version": __version__,
        "created_at": _timestamp(),
        "seed": seed,
        "config": config,
        "inputs": {
            name: {"path": p, "sha256": file_digest(p)} for name, p in (inputs or {}).items()
        },
        "outputs": sorted(Path(p).relative_to(out_dir).as_posix() for p in outputs),
    }
    if summary is not None:
        doc["summary"] = summary
    return write_json(out_dir / "manifest.json", doc)
