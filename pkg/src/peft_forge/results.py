"""Durable experiment results: append-only JSON-lines store and summaries.

Each line is one self-describing JSON record:

    {"experiment_id": str, "config_hash": str, "method": str, "domain": str,
     "episode_index": int, "seed": int, "report": {EpisodeReport fields}}

`config_hash` is the SHA-256 of the canonicalized experiment configuration,
so records from different experiments can share a file; mixing different
hashes under one experiment id is an integrity error.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from typing import Dict, List, Sequence, Tuple

from .analysis import mean_ci95


class StoreError(RuntimeError):
    pass


def config_hash(config: Dict) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON form."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def append_report(path, record: Dict) -> None:
    """Append one record as a single line; the line is written atomically."""
    line = json.dumps(record, sort_keys=True) + "\n"
    try:
        with open(path, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()
    except OSError as exc:
        raise StoreError(f"cannot append to results store '{path}': {exc}") from exc


def read_reports(path) -> Tuple[List[Dict], int]:
    """Read all well-formed records; skip malformed lines with a warning.

    Returns (records, number of skipped lines).
    """
    records, skipped = [], 0
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise StoreError(f"cannot read results store '{path}': {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict) or "report" not in rec:
                raise ValueError("not a report record")
            records.append(rec)
        except ValueError:
            skipped += 1
            warnings.warn(f"skipping malformed line {lineno} in {path}")
    return records, skipped


def check_integrity(records: Sequence[Dict]) -> None:
    """Every experiment id must carry exactly one config hash."""
    seen: Dict[str, str] = {}
    for rec in records:
        eid, h = rec.get("experiment_id", ""), rec.get("config_hash", "")
        if eid in seen and seen[eid] != h:
            raise StoreError(
                f"experiment '{eid}' contains records with conflicting config hashes"
            )
        seen.setdefault(eid, h)


def summarize(records: Sequence[Dict]) -> List[Dict]:
    """Per (domain, method) mean query accuracy with 95% CI of the mean."""
    groups: Dict[Tuple[str, str], List[float]] = {}
    for rec in records:
        key = (rec.get("domain", "unknown"), rec.get("method", "unknown"))
        groups.setdefault(key, []).append(float(rec["report"]["accuracy"]))
    rows = []
    for (domain, method) in sorted(groups):
        accs = groups[(domain, method)]
        mean, ci = mean_ci95(accs)
        rows.append({"domain": domain, "method": method, "episodes": len(accs),
                     "mean_accuracy": round(mean, 10), "ci95": round(ci, 10)})
    return rows


def write_summary_csv(path, rows: Sequence[Dict]) -> None:
    header = ["domain", "method", "episodes", "mean_accuracy", "ci95"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(str(r[k]) for k in header))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
