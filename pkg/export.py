import json
from pathlib import Path

import numpy as np
import pandas as pd

from config import VERSION

# 17 significant digits round-trip a double exactly
FLOAT_FORMAT = "%.17g"

UNITS = "t: time; f_n: clusters of size n per unit volume; M: mass (monomers per unit volume)"


# Deterministic file names: same run, same name (no timestamps)
def build_filename(prefix: str, kind: str, ext: str = "csv") -> str:
    return f"{prefix}_{kind}.{ext}"


# Header block shared by every CSV: units, truncation, policy, tolerances
def run_metadata(config) -> dict:
    return {
        "label": config.label,
        "units": UNITS,
        "N": config.N,
        "policy": config.policy,
        "method": config.method,
        "rtol": config.rtol,
        "atol": config.atol,
        "m": config.m,
        "version": VERSION,
    }


def write_table(df: pd.DataFrame, path, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for key, value in meta.items():
            handle.write(f"# {key}: {value}\n")
        df.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


# numpy scalars/arrays and non-finite floats are not JSON; map them explicitly
def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if np.isnan(value):
            return None
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def write_json(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# Columns: t, M, norm_m, boundary_flux, leaked_mass, then f_n at the requested sizes
def trace_frame(trace, indices) -> pd.DataFrame:
    columns = {
        "t": trace.times,
        "M": trace.mass,
        "norm_m": trace.norm_m,
        "boundary_flux": trace.boundary_flux,
        "leaked_mass": trace.leaked_mass,
    }
    for n in indices:
        if n <= trace.N:
            columns[f"f_{n}"] = trace.states[:, n - 1]
    return pd.DataFrame(columns)
