"""Single-file checkpoints.

Layout::

    b"STCKPT01"                magic
    uint64 little-endian       header length in bytes
    header                     UTF-8 JSON (arch, layer specs, rng state, step, blocks)
    float64 little-endian      parameter blocks, in layer order then ``blocks`` order
"""
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import LayerSpec, Model

MAGIC = b"STCKPT01"


def checkpoint_bytes(model, step=0, rng_state=None, extra=None):
    blocks = []
    payload = []
    for i, p in enumerate(model.params):
        for name in sorted(p):
            arr = np.ascontiguousarray(p[name], dtype="<f8")
            blocks.append({"layer": i, "name": name, "shape": list(arr.shape)})
            payload.append(arr.tobytes())
    header = {
        "format": 1,
        "arch_id": model.arch_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "sd_survival": model.sd_survival,
        "layers": [{"kind": s.kind, "width": s.width, "activation": s.activation} for s in model.layers],
        "step": int(step),
        "rng_state": rng_state,
        "blocks": blocks,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payload)


def save_checkpoint(path, model, step=0, rng_state=None, extra=None):
    """Write atomically; returns the sha256 hex digest of the file."""
    data = checkpoint_bytes(model, step, rng_state, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()


def parse_checkpoint(data):
    if data[:8] != MAGIC:
        raise ValueError("not a selftrain checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    layers = [LayerSpec(d["kind"], d["width"], d["activation"]) for d in header["layers"]]
    params = [{} for _ in layers]
    for blk in header["blocks"]:
        count = int(np.prod(blk["shape"])) if blk["shape"] else 1
        end = offset + 8 * count
        if end > len(data):
            raise ValueError(f"checkpoint truncated in block {blk['name']!r} of layer {blk['layer']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(blk["shape"])
        params[blk["layer"]][blk["name"]] = arr
        offset = end
    model = Model(
        header["arch_id"],
        tuple(header["input_shape"]),
        header["num_classes"],
        layers,
        params,
        header.get("sd_survival", 1.0),
    )
    return model, header


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
