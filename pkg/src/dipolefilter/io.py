"""Result files: deterministic CSV/JSON writers and dataset round-trips.

Floats in CSV use ``%.17g`` so that values survive a round-trip bit for bit;
JSON is written with sorted keys and Python's shortest round-trip repr.
Every JSON document carries a ``schema`` field.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .model import NAM

DATASET_SCHEMA = "dipolefilter.dataset/1"
OUTPUT_SCHEMA = "dipolefilter.filter-output/1"
REPRESENTATIVE_SCHEMA = "dipolefilter.representative/1"
MANIFEST_SCHEMA = "dipolefilter.manifest/1"
TIMING_SCHEMA = "dipolefilter.timing/1"
COMPARE_SCHEMA = "dipolefilter.compare/1"


class DataError(RuntimeError):
    """Missing, malformed, or inconsistent input files."""


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return "%.17g" % x


def write_csv(path, header, rows) -> None:
    """Write rows; NaN and ``None`` become empty (missing) cells."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Numeric CSV with a header row; empty cells read as NaN."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    try:
        data = np.array([[float(v) if v != "" else np.nan for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return rows[0], data.reshape(len(rows) - 1, len(rows[0]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if math.isnan(x) or math.isinf(x) else x
    return obj


def write_json(path, schema: str, payload: dict) -> None:
    doc = {"schema": schema, **_jsonable(payload)}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def read_json(path, schema: str | None = None) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if schema is not None and doc.get("schema") != schema:
        raise DataError(f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}")
    return doc


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root, exclude=("manifest.json", "timing.json")) -> dict:
    """``relative path -> sha256`` for every file under ``root``."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[p.relative_to(root).as_posix()] = file_hash(p)
    return out


# -- datasets -----------------------------------------------------------------


def save_dataset(directory, record, grid) -> None:
    """Measurements and pre-stimulus block (tesla), truth per step, and metadata."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    S = record.measurements.shape[1]
    sensors = [f"s{k}" for k in range(S)]
    write_csv(d / "measurements.csv", ["t"] + sensors,
              ([t + 1, *row] for t, row in enumerate(record.measurements)))
    write_csv(d / "prestim.csv", ["t"] + sensors,
              ([t - len(record.prestim) + 1, *row] for t, row in enumerate(record.prestim)))
    steps = []
    for t in range(1, record.T + 1):
        truth = record.truth(t, grid)
        act = record.active(t)
        steps.append({"t": t, "dipoles": [
            {"source": int(k), "grid_index": int(record.source_locations[k]),
             "location_m": truth.locations[i], "moment_nam": truth.moments[i]}
            for i, k in enumerate(act)]})
    write_json(d / "truth.json", DATASET_SCHEMA, {
        "sources": [{"grid_index": int(g), "moment_nam": m / NAM, "onset": on, "offset": off}
                    for g, m, (on, off) in zip(record.source_locations, record.source_moments, record.schedule)],
        "steps": steps,
    })
    noise = np.concatenate([record.prestim, record.measurements - record.noiseless])
    write_json(d / "meta.json", DATASET_SCHEMA, {
        "seed": record.seed,
        "scenario": record.config.__dict__,
        "T": record.T,
        "n_sensors": S,
        "noise_draw_sha256": _array_hash(noise),
    })


def _array_hash(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def load_measurements(directory) -> tuple[np.ndarray, np.ndarray]:
    d = Path(directory)
    _, meas = read_csv(d / "measurements.csv")
    _, pre = read_csv(d / "prestim.csv")
    if meas.shape[1] != pre.shape[1]:
        raise DataError(f"{d}: measurement and pre-stimulus widths differ")
    return meas[:, 1:], pre[:, 1:]


def load_truth(directory) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per step ``(locations m, moments nAm)`` of the true dipoles."""
    doc = read_json(Path(directory) / "truth.json", DATASET_SCHEMA)
    out = []
    for step in doc["steps"]:
        dip = step["dipoles"]
        out.append((np.array([x["location_m"] for x in dip], dtype=float).reshape(-1, 3),
                    np.array([x["moment_nam"] for x in dip], dtype=float).reshape(-1, 3)))
    return out


# -- filter outputs -------------------------------------------------------------


def save_filter_output(directory, output, meta: dict) -> None:
    """Evidence/ESS traces, count pmf, sparse intensity and representative sets."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    N = output.n_particles
    write_json(d / "output.json", OUTPUT_SCHEMA, {
        **meta,
        "n_particles": N,
        "log_evidence": output.log_evidence,
        "step_log_evidence": output.step_log_evidence,
        "cum_log_evidence": output.cum_log_evidence,
        "ess": output.ess,
        "eval_counts": output.eval_counts,
        "mean_n_dipoles": output.mean_n_dipoles,
        "mean_lifetime": output.mean_lifetime,
    })
    write_csv(d / "traces.csv", ["t", "step_log_evidence", "cum_log_evidence", "ess", "ess_fraction"],
              ([t + 1, s, c, e, e / N] for t, (s, c, e) in
               enumerate(zip(output.step_log_evidence, output.cum_log_evidence, output.ess))))
    if not output.summaries:
        return
    n_max = len(output.summaries[0].n_pmf) - 1
    write_csv(d / "n_pmf.csv", ["t"] + [f"p{k}" for k in range(n_max + 1)],
              ([t + 1, *s.n_pmf] for t, s in enumerate(output.summaries)))

    def intensity_rows():
        for t, s in enumerate(output.summaries):
            for k in np.nonzero(s.intensity > 0)[0]:
                yield [t + 1, int(k), s.intensity[k]]

    write_csv(d / "intensity.csv", ["t", "grid_index", "intensity"], intensity_rows())
    write_json(d / "representative.json", REPRESENTATIVE_SCHEMA, {"steps": [
        {"t": t + 1, "n_mode": s.n_mode, "shortfall": s.shortfall,
         "dipoles": [{"grid_index": k, "moment_nam": np.asarray(q) / NAM} for k, q in s.representative_set]}
        for t, s in enumerate(output.summaries)]})


def load_representative(directory) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per step ``(grid indices, moments nAm)`` of the representative set."""
    doc = read_json(Path(directory) / "representative.json", REPRESENTATIVE_SCHEMA)
    out = []
    for step in doc["steps"]:
        dip = step["dipoles"]
        idx = np.array([x["grid_index"] for x in dip], dtype=np.int64)
        mom = np.array([[np.nan if v is None else v for v in x["moment_nam"]] for x in dip], dtype=float)
        out.append((idx, mom.reshape(-1, 3)))
    return out
