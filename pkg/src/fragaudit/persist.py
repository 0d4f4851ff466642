"""Canonical serialization: byte-stable JSON/JSONL/CSV and config hashing.

Floats render as shortest round-trip text (Python repr), keys are sorted, and
no output contains wall-clock state, so rerunning a command with the same
config reproduces every file byte for byte.
"""

import hashlib
import json
import sys

TOOL_VERSION = "0.1.0"


def canonical_json(obj, indent=None) -> str:
    return json.dumps(obj, sort_keys=True, indent=indent,
                      separators=(",", ": ") if indent else (",", ":"),
                      allow_nan=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def stamp(obj: dict, cfg_hash: str) -> dict:
    out = dict(obj)
    out["config_hash"] = cfg_hash
    out["tool_version"] = TOOL_VERSION
    return out


def write_json(path, obj: dict, cfg_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(stamp(obj, cfg_hash), indent=2) + "\n")


def write_jsonl(path, dicts, cfg_hash: str) -> None:
    with open(path, "w") as fh:
        for d in dicts:
            fh.write(canonical_json(stamp(d, cfg_hash)) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows, cfg_hash: str) -> None:
    """CSV with a comment header carrying the config hash and tool version."""
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash} tool_version={TOOL_VERSION}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt_cell(v) for v in row) + "\n")


def trace_csv_rows(trace):
    names = sorted(trace.measures)
    header = ["epoch", "train_acc", "train_ce", "test_error"] + names
    rows = []
    for k, epoch in enumerate(trace.epochs):
        row = [epoch, trace.train_acc[k], trace.train_ce[k], trace.test_error[k]]
        row += [trace.measures[m][k] for m in names]
        rows.append(row)
    return header, rows


def error_exit(exc, code: int = 1) -> int:
    payload = exc.payload() if hasattr(exc, "payload") else {
        "error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(canonical_json(payload) + "\n")
    return code
