"""report.json layout.

The schema below is JSON Schema (draft 2020-12).  Bump REPORT_VERSION on any
incompatible change.
"""

import json
import math
import os

REPORT_VERSION = 1

_COUNTERS = {
    "type": "object",
    "required": ["rank", "frames", "messages", "bytes", "elements"],
    "properties": {
        "rank": {"type": "integer", "minimum": 0},
        "frames": {"type": "integer", "minimum": 0},
        "messages": {"type": "integer", "minimum": 0},
        "bytes": {"type": "integer", "minimum": 0},
        "elements": {"type": "integer", "minimum": 0},
    },
}

_NUM_OR_NULL = {"type": ["number", "null"]}

_RECON = {
    "type": "object",
    "required": ["iterations", "final_error", "error_history", "transport"],
    "properties": {
        "iterations": {"type": "integer", "minimum": 0},
        "final_error": _NUM_OR_NULL,
        "error_history": {"type": "array", "items": {"type": "number"}},
        "transport": {
            "type": "object",
            "required": ["per_rank", "total_bytes", "total_messages"],
            "properties": {
                "per_rank": {"type": "array", "items": _COUNTERS},
                "total_bytes": {"type": "integer", "minimum": 0},
                "total_messages": {"type": "integer", "minimum": 0},
            },
        },
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bridgegrid report",
    "type": "object",
    "required": ["report_version", "command", "workers", "allreduce_variant", "solver", "dataset"],
    "properties": {
        "report_version": {"const": REPORT_VERSION},
        "command": {"enum": ["run", "stream"]},
        "workers": {"type": "integer", "minimum": 1},
        "allreduce_variant": {"enum": ["TREE", "RING"]},
        "solver": {"type": "object", "required": ["algorithm", "beta", "iterations"]},
        "dataset": {
            "type": "object",
            "required": ["source", "frames", "object_shape", "probe_shape"],
            "properties": {
                "source": {"enum": ["path", "simulated", "stream"]},
                "frames": {"type": "integer", "minimum": 0},
                "object_shape": {"type": "array", "items": {"type": "integer"}},
                "probe_shape": {"type": "array", "items": {"type": "integer"}},
            },
        },
        "outputs": {"type": "object", "additionalProperties": {"type": "string"}},
        "quality": {"type": ["object", "null"]},
        "batches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["batch_index", "records", "topics", "result"],
                "properties": {
                    "batch_index": {"type": "integer", "minimum": 0},
                    "records": {"type": "integer", "minimum": 0},
                    "topics": {"type": "object", "additionalProperties": {"type": "integer"}},
                    "result": {
                        "type": "object",
                        "required": ["frames_new", "frames_total", "reconstructed", "final_error"],
                    },
                },
            },
        },
    },
    "allOf": [
        {"if": {"properties": {"command": {"const": "run"}}},
         "then": {"required": ["iterations", "final_error", "error_history", "transport"],
                  "properties": _RECON["properties"]}},
        {"if": {"properties": {"command": {"const": "stream"}}},
         "then": {"required": ["batches"]}},
    ],
}


def transport_summary(counters):
    return {
        "per_rank": counters,
        "total_bytes": int(sum(c["bytes"] for c in counters)),
        "total_messages": int(sum(c["messages"] for c in counters)),
    }


def _clean(value):
    # JSON has no NaN/inf
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def write_report(path, report):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
