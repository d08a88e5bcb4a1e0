"""Versioned, digest-checked model checkpoints.

Layout: a magic line, one JSON header line ``{"format_version", "payload_bytes",
"sha256"}`` and an ``.npz`` payload holding the flat parameter vector, the
fixed arrays and a JSON metadata blob (model spec plus caller metadata).
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .errors import CheckpointCorrupted, CheckpointVersionError
from .inference import GPODE, FixedArrays, ModelSpec, template_parameters

MAGIC = b"DNFODE-CHECKPOINT\n"
FORMAT_VERSION = 1
_FIXED_FIELDS = ("basis_frequencies", "basis_phases", "emission_mean", "emission_components", "t0")


def checkpoint_bytes(model: GPODE, metadata: dict | None = None) -> bytes:
    flat = np.asarray(ravel_pytree(model.params)[0], dtype=np.float64)
    meta = {"spec": model.spec.to_dict(), "metadata": metadata or {}}
    arrays = {"params_flat": flat,
              "meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name in _FIXED_FIELDS:
        arrays[f"fixed_{name}"] = np.asarray(getattr(model.fixed, name), dtype=np.float64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = json.dumps({"format_version": FORMAT_VERSION, "payload_bytes": len(payload),
                         "sha256": hashlib.sha256(payload).hexdigest()}, sort_keys=True)
    return MAGIC + header.encode() + b"\n" + payload


def checkpoint_save(model: GPODE, path, metadata: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def checkpoint_from_bytes(blob: bytes):
    """Returns (model, metadata)."""
    if not blob.startswith(MAGIC):
        raise CheckpointCorrupted("not a checkpoint (bad magic)")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointCorrupted("truncated checkpoint header")
    try:
        header = json.loads(rest[:nl].decode())
        version = header["format_version"]
        size = int(header["payload_bytes"])
        digest = header["sha256"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointCorrupted(f"unreadable checkpoint header ({exc})") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version!r}, this build reads {FORMAT_VERSION}")
    payload = rest[nl + 1:]
    if len(payload) != size:
        raise CheckpointCorrupted(f"payload is {len(payload)} bytes, header says {size} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointCorrupted("payload digest mismatch")
    with np.load(io.BytesIO(payload)) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays["meta_json"].tobytes().decode())
    spec = ModelSpec.from_dict(meta["spec"])
    template = template_parameters(spec)
    flat_t, unravel = ravel_pytree(template)
    if arrays["params_flat"].shape != flat_t.shape:
        raise CheckpointCorrupted("parameter vector does not match the stored model spec")
    params = unravel(jnp.asarray(arrays["params_flat"]))
    fixed = FixedArrays(**{n: jnp.asarray(arrays[f"fixed_{n}"]) for n in _FIXED_FIELDS})
    return GPODE(spec, params, fixed), meta["metadata"]


def checkpoint_load(path):
    """Returns (model, metadata); raises CheckpointError subclasses on any defect."""
    return checkpoint_from_bytes(Path(path).read_bytes())
