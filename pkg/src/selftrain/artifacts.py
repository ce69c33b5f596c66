"""Run outputs: atomic file writes, metrics JSON lines, summaries, CSV and manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from .config import dump_config


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj):
    return json.dumps(obj, sort_keys=True, default=_default)


def _default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def emit_metrics(records, out_dir, summary=None, name="metrics", csv_fields=None):
    """Write ``<name>.jsonl`` (one line per record), ``summary.json`` and ``<name>.csv``.

    Each file appears atomically. Without an explicit ``summary``, the
    summary is the last record. Returns the summary dict.
    """
    out_dir = Path(out_dir)
    records = list(records)
    atomic_write(out_dir / f"{name}.jsonl", "".join(_json(r) + "\n" for r in records))
    if summary is None:
        summary = dict(records[-1]) if records else {}
    atomic_write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_default) + "\n")
    fields = csv_fields or sorted({k for r in records for k, v in r.items() if not isinstance(v, (dict, list))})
    if fields:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
        atomic_write(out_dir / f"{name}.csv", buf.getvalue())
    return summary


def append_jsonl(path, record):
    """Append one record as a JSON line (used for streaming progress)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(_json(record) + "\n")


def sha256_arrays(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        if a is not None:
            h.update(memoryview(a.__array__()).tobytes())
    return h.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs=None, outputs=None, started=None):
    """``manifest.json``: command, resolved config, seed, content hashes and timestamps."""
    manifest = {
        "command": command,
        "config": json.loads(dump_config(config)) if config is not None else None,
        "seed": seed,
        "inputs": inputs or {},
        "outputs": outputs or {},
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write(Path(out_dir) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
