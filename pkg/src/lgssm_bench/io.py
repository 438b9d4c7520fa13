"""File formats: dataset CSV, fitted-parameter JSON, trained-network npz,
prediction CSV.

Every float written as text uses 17 significant digits, which round-trips
float64 exactly, so re-reading a file reproduces the in-memory values bit
for bit.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from .em import EmFitResult
from .lstm import LstmParams, Normalizer, TrainConfig, config_from_dict
from .ssm import Dataset, ModelParams

PARAM_KEYS = ("F", "H", "Q", "R", "mu0", "Sigma0")
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def fmt_float(x: float) -> str:
    return f"{float(x):.17g}"


_MARK = "@@float:"
_TOKEN = re.compile(r'"@@float:([^"]*)"')


def _mark_floats(obj):
    if isinstance(obj, dict):
        return {k: _mark_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_mark_floats(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            text = "NaN"
        elif math.isinf(x):
            text = "Infinity" if x > 0 else "-Infinity"
        else:
            text = fmt_float(x)
        return _MARK + text
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _mark_floats(obj.tolist())
    return obj


def dumps(obj) -> str:
    """json.dumps, with every float written at 17 significant digits."""
    return _TOKEN.sub(r"\1", json.dumps(_mark_floats(obj), indent=2)) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, newline="\n")
    return path


# dataset CSV

def write_dataset(path, data: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "label", "k"] + [f"z_{j + 1}" for j in range(data.m_z)])
        for i in range(len(data)):
            label = int(data.labels[i])
            for k in range(data.T):
                w.writerow([i, label, k + 1] + [fmt_float(v) for v in data.observations[i, k]])
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        m_z = len(header) - 3
        expect = ["seq_id", "label", "k"] + [f"z_{j + 1}" for j in range(m_z)]
        if m_z < 1 or header != expect:
            raise FormatError(f"{path}: header must be {','.join(expect[:4])}..., got {','.join(header)}")
        seqs: dict[int, list] = {}
        labels: dict[int, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                sid, label, k = int(row[0]), int(row[1]), int(row[2])
                z = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from None
            rows = seqs.setdefault(sid, [])
            if labels.setdefault(sid, label) != label:
                raise FormatError(f"{path}:{line_no}: sequence {sid} changes label")
            if k != len(rows) + 1:
                raise FormatError(f"{path}:{line_no}: sequence {sid} expected k={len(rows) + 1}, got {k}")
            rows.append(z)
    if not seqs:
        raise FormatError(f"{path}: no data rows")
    ids = sorted(seqs)
    lengths = {len(seqs[i]) for i in ids}
    if len(lengths) != 1:
        raise FormatError(f"{path}: sequences have unequal lengths {sorted(lengths)}")
    try:
        return Dataset(np.array([seqs[i] for i in ids]), [labels[i] for i in ids], {"seq_ids": ids})
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# fitted parameters

def params_to_dict(params: ModelParams) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.as_dict().items()}


def params_from_dict(d: dict) -> ModelParams:
    missing = [k for k in PARAM_KEYS if k not in d]
    if missing:
        raise FormatError(f"missing parameter keys: {', '.join(missing)}")
    arrays = {}
    for k in PARAM_KEYS:
        entry = d[k]
        try:
            arrays[k] = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"parameter {k}: {exc}") from None
    return ModelParams(**arrays)


def write_params(path, params: ModelParams, fit: EmFitResult | None = None, **extra) -> Path:
    doc = {"format_version": FORMAT_VERSION, **params_to_dict(params)}
    if fit is not None:
        doc["train_log_likelihood"] = fit.train_log_likelihood
        doc["restart"] = {
            "best_index": fit.restart_index,
            "iterations_used": fit.iterations_used,
            "converged": fit.converged,
            "restart_log_likelihoods": fit.restart_log_likelihoods,
        }
    doc.update(extra)
    return write_text(path, dumps(doc))


def read_params(path) -> tuple[ModelParams, dict]:
    """Parameters and the remaining metadata of a parameter file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    params = params_from_dict(doc)
    return params, {k: v for k, v in doc.items() if k not in PARAM_KEYS}


# trained network

def save_network(path, params: LstmParams, norm: Normalizer, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in params.tensors().items()}
    arrays["norm/mean"] = norm.mean
    arrays["norm/std"] = norm.std
    arrays["config"] = np.array(json.dumps(config.as_dict(), sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_network(path) -> tuple[LstmParams, Normalizer, TrainConfig]:
    with np.load(path, allow_pickle=False) as z:
        try:
            params = LstmParams(**{k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")})
            norm = Normalizer(z["norm/mean"], z["norm/std"])
            config = config_from_dict(json.loads(str(z["config"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a saved network ({exc})") from None
    try:
        params.check()
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return params, norm, config


# predictions

def write_predictions(path, pred, truth=None, loglik1=None, loglik2=None, seq_ids=None) -> Path:
    """Prediction CSV; unknown truth or absent log-likelihoods are left blank."""
    n = len(pred)
    seq_ids = range(n) if seq_ids is None else seq_ids
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "true_label", "pred_label", "loglik1", "loglik2"])
        for i, sid in enumerate(seq_ids):
            w.writerow([
                sid,
                "" if truth is None else int(truth[i]),
                int(pred[i]),
                "" if loglik1 is None else fmt_float(loglik1[i]),
                "" if loglik2 is None else fmt_float(loglik2[i]),
            ])
    return path
