"""Run report assembly, schema validation, and delimited output.

Reports are deterministic: JSON is emitted with sorted keys and no
wall-clock content (timings go to a sibling file that is excluded from
reproducibility comparisons).
"""

from __future__ import annotations

import json
from importlib import resources

import jsonschema
import numpy as np


def load_report_schema():
    ref = resources.files("poegpc").joinpath("schemas/report.schema.json")
    return json.loads(ref.read_text())


def validate_report(report):
    """Raise jsonschema.ValidationError if the report violates the schema."""
    jsonschema.validate(report, load_report_schema())


def build_report(
    *,
    version,
    config_hash,
    num_classes,
    num_test_points,
    predictive_samples,
    predictive_seed,
    stream_kernels,
    expert_rows,
    fusion_rows,
    root_label,
):
    """Assemble the report dict.

    ``expert_rows`` maps stream -> list of (index, train_size, accuracy,
    log_marginal); ``fusion_rows`` is an ordered list of (label, accuracy,
    confusion matrix), parents before children, every internal node once.
    """
    streams = {}
    for name, kernel in stream_kernels.items():
        streams[name] = {
            "kernel": {
                "signal_variance": float(kernel.signal_variance),
                "length_scale": float(kernel.length_scale),
                "jitter": float(kernel.effective_jitter),
            },
            "experts": [
                {
                    "index": int(i),
                    "train_size": int(size),
                    "accuracy": float(acc),
                    "log_marginal": float(lml),
                }
                for i, size, acc, lml in expert_rows[name]
            ],
        }
    report = {
        "library_version": version,
        "config_hash": config_hash,
        "num_classes": int(num_classes),
        "num_test_points": int(num_test_points),
        "predictive_samples": int(predictive_samples),
        "predictive_seed": int(predictive_seed),
        "streams": streams,
        "fusion": [
            {
                "label": label,
                "accuracy": float(acc),
                "confusion": np.asarray(confusion, dtype=np.int64).tolist(),
            }
            for label, acc, confusion in fusion_rows
        ],
        "root": root_label,
    }
    validate_report(report)
    return report


def write_json(payload, path):
    with open(str(path), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_posteriors_csv(posterior, path):
    """Write per-point class posteriors: header row, then index + C columns."""
    posterior = np.asarray(posterior, dtype=np.float64)
    cols = ",".join(f"p{c}" for c in range(posterior.shape[1]))
    with open(str(path), "w") as fh:
        fh.write(f"index,{cols}\n")
        for i, row in enumerate(posterior):
            fh.write(str(i) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_posteriors_csv(path):
    """Read a posteriors CSV back into an (n, C) array."""
    with open(str(path)) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "index":
            raise ValueError(f"{path}: not a posteriors CSV (missing 'index' header)")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise ValueError(f"{path}: row {len(rows)} has {len(parts)} fields, expected {len(header)}")
            rows.append([float(v) for v in parts[1:]])
    if not rows:
        raise ValueError(f"{path}: no posterior rows")
    return np.asarray(rows, dtype=np.float64)
