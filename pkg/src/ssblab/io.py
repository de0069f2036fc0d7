"""Run configuration parsing and result files.

Configs are flat JSON objects whose keys are the fields of ``ProtocolConfig``.
Every number written to disk uses 17 significant digits so outputs are
byte-stable for identical inputs.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .protocol import SERIES_COLUMNS, ConfigError, ExperimentResult, ProtocolConfig

REQUIRED_KEYS = ("n",)
_INT_KEYS = {"n", "n_tau_r", "n_times", "hist_samples", "n_long", "seed"}
_STR_KEYS = {"model", "targets"}
_BOOL_KEYS = {"fit_gge"}
_OPTIONAL_KEYS = {"h_c", "h1"}
_LIST_KEYS = {"epsilons"}
CSV_SCHEMA_VERSION = 1


def fmt(x) -> str:
    """17-significant-digit decimal for floats, plain for ints."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x + 0.0, ".17g")  # + 0.0 folds -0 into 0


def dumps(obj, indent: int = 0) -> str:
    """JSON text with every float printed by ``fmt``."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (bool, np.bool_, int, np.integer, float, np.floating)):
        return fmt(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[" + ", ".join(dumps(v, indent + 1) for v in seq) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _coerce(key, value):
    if key in _OPTIONAL_KEYS and value is None:
        return None
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if key in _LIST_KEYS:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list of numbers, got {value!r}")
        return [_coerce_number(f"{key}[{i}]", v) for i, v in enumerate(value)]
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    return _coerce_number(key, value)


def _coerce_number(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(key, f"must be finite, got {value!r}")
    return value


def config_from_mapping(data: dict) -> ProtocolConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = set(ProtocolConfig.field_names())
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown key")
    for key in REQUIRED_KEYS:
        if key not in data:
            raise ConfigError(key, "missing required field")
    values = {k: _coerce(k, v) for k, v in data.items()}
    return ProtocolConfig(**values)


def parse_config(path) -> ProtocolConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from exc
    return config_from_mapping(data)


# ---------------------------------------------------------------- writers


def _write(path: Path, text: str) -> str:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(text.encode()).hexdigest()


def csv_text(columns, rows) -> str:
    lines = [",".join(columns)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def series_csv(series) -> str:
    if series is None:
        return csv_text(SERIES_COLUMNS, [])
    cols = [series.times] + [np.asarray(series.values[k]) for k in SERIES_COLUMNS[1:]]
    return csv_text(SERIES_COLUMNS, zip(*cols))


def histogram_csv(hist) -> str:
    if hist is None:
        return csv_text(("m", "mean_p", "std_p"), [])
    return csv_text(("m", "mean_p", "std_p"),
                    zip(hist.m_values, hist.mean_probabilities, hist.std_probabilities))


def table_csv(table: dict) -> str:
    cols = list(table)
    return csv_text(cols, zip(*[np.asarray(table[c]) for c in cols]))


def emit_results(result: ExperimentResult, out_dir) -> dict:
    """Write the result files, then ``manifest.json`` with their digests.

    Returns ``{filename: sha256}`` for the non-manifest files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    digests = _emit_into(result, out, "")
    manifest = dict(result.manifest)
    manifest["files"] = digests
    manifest["csv_schema_version"] = CSV_SCHEMA_VERSION
    _write(out / "manifest.json", dumps(manifest) + "\n")
    return digests


def _emit_into(result, out: Path, prefix: str) -> dict:
    digests = {}

    def put(name, text):
        digests[prefix + name] = _write(out / name, text)

    put("config.json", dumps(result.config) + "\n")
    if result.kind in ("quench", "sweep-item", "distribution"):
        put("series.csv", series_csv(result.series))
    if result.kind in ("quench", "distribution"):
        put("hist.csv", histogram_csv(result.histogram))
    if result.kind in ("quench", "sweep-item", "sweep"):
        put("gge.json", dumps(result.gge if result.kind != "sweep" else _sweep_summary(result)) + "\n")
    for name, table in result.tables.items():
        put(f"{name}.csv", table_csv(table))
    if result.scalars:
        put("scalars.json", dumps(result.scalars) + "\n")
    for key, child in result.children.items():
        sub = out / key
        sub.mkdir(exist_ok=True)
        digests.update(_emit_into(child, sub, f"{key}/"))
    return digests


def _sweep_summary(result) -> dict:
    return {k: {f: c.gge.get(f) for f in ("beta", "lambda_c", "c_measured", "roundtrip_error")}
            for k, c in result.children.items()}


def basis_csv(basis) -> str:
    return csv_text(("rep_bits", "orbit_size", "parity"),
                    zip(basis.representatives.tolist(), basis.orbit_sizes.tolist(), basis.parities.tolist()))


def operator_csv(matrix) -> str:
    """Nonzero entries as ``row,col,re,im`` triplets in row-major order."""
    import scipy.sparse as sp

    dense = matrix if isinstance(matrix, np.ndarray) else None
    if dense is None and not sp.issparse(matrix):
        dense = matrix.toarray()
    coo = sp.coo_matrix(dense) if dense is not None else matrix.tocoo()
    coo.sum_duplicates()
    order = np.lexsort((coo.col, coo.row))
    data = coo.data[order].astype(complex)
    return csv_text(("row", "col", "re", "im"),
                    zip(coo.row[order].tolist(), coo.col[order].tolist(), data.real, data.imag))
