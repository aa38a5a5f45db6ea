"""Self-describing binary checkpoint container.

Layout: a magic line, an 8-byte little-endian header length, a JSON header,
then the raw bytes of every array back to back in header order. The header
carries the format version, a caller-supplied metadata dict (step counter,
seed, config echo), and one entry per array with name, dtype, shape, and
offset into the data section.

Writing is fully deterministic: sorted entry order, canonical JSON, C-order
bytes. Saving, loading, and saving again produces byte-identical files, so
checkpoints can be compared with a plain hash.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"HYBLM-CKPT\n"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None):
    """Write named arrays plus JSON-able metadata to ``path``."""
    entries = []
    offset = 0
    names = sorted(arrays)
    blobs = []
    for name in names:
        # tobytes() emits C order for any layout and keeps 0-d shapes intact
        arr = np.asarray(arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION,
              "meta": meta or {},
              "entries": entries}
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path):
    """Read a container back; returns (meta, {name: array})."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path} is truncated (no header length)")
    (header_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + header_len:
        raise CheckpointError(f"{path} is truncated (incomplete header)")
    try:
        header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} format version {header.get('format_version')} unsupported")
    data_start = pos + header_len
    arrays = {}
    for entry in header["entries"]:
        start = data_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path} is truncated (array {entry['name']})")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"{path}: array {entry['name']} size mismatch")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# model/state packing


def pack_parameters(model, prefix="param/"):
    """Unique parameter arrays plus an alias map for shared storage."""
    arrays = {}
    aliases = {}
    owner = {}
    for name, p in model.named_parameters().items():
        if id(p) in owner:
            aliases[name] = owner[id(p)]
        else:
            owner[id(p)] = name
            arrays[prefix + name] = p.data
    return arrays, aliases


def apply_parameters(model, arrays, aliases=None, prefix="param/"):
    """Load arrays back into a built model, re-linking shared storage."""
    aliases = aliases or {}
    named = model.named_parameters()
    for name, p in named.items():
        source = aliases.get(name, name)
        key = prefix + source
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {source}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arr.shape} != model {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype, copy=False)


def pack_model_state(state, prefix="state/"):
    """Carried per-layer state as named arrays; None entries leave no trace."""
    from .blocks import AttentionMemory, QRNNState

    arrays = {}
    for i, entry in enumerate(state.entries):
        if isinstance(entry, QRNNState):
            arrays[f"{prefix}{i}/cell"] = entry.cell
            arrays[f"{prefix}{i}/fresh"] = np.array([entry.fresh], dtype=np.uint8)
        elif isinstance(entry, AttentionMemory):
            arrays[f"{prefix}{i}/memory"] = entry.data
            arrays[f"{prefix}{i}/valid"] = entry.valid.astype(np.uint8)
    return arrays


def unpack_model_state(model, arrays, prefix="state/"):
    """Rebuild a ``ModelState`` for ``model`` from packed arrays."""
    from .blocks import AttentionMemory, QRNNState
    from .model import ModelState

    template = model.initial_state(1)
    entries = []
    for i, entry in enumerate(template.entries):
        if isinstance(entry, QRNNState):
            cell = arrays.get(f"{prefix}{i}/cell")
            if cell is None:
                raise CheckpointError(f"checkpoint missing recurrent state {i}")
            fresh = bool(arrays[f"{prefix}{i}/fresh"][0])
            entries.append(QRNNState(cell.copy(), fresh=fresh))
        elif isinstance(entry, AttentionMemory):
            mem = arrays.get(f"{prefix}{i}/memory")
            if mem is None:
                raise CheckpointError(f"checkpoint missing attention memory {i}")
            valid = arrays[f"{prefix}{i}/valid"].astype(bool)
            entries.append(AttentionMemory(mem.copy(), valid))
        else:
            entries.append(None)
    return ModelState(entries)
