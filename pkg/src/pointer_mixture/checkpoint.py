"""Single-file parameter archive.

Layout (all integers little-endian)::

    8 bytes   magic  b"PMNCKPT1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header
    ...       raw tensor buffers, concatenated in header order

The header holds ``precision``, ``seed``, a free-form ``config`` object and a
``tensors`` list of ``{name, shape, dtype, offset, nbytes}`` where ``dtype``
is a little-endian numpy type string (``<f4`` or ``<f8``) and ``offset`` is
relative to the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMNCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, *, precision: str, config: dict, seed: int,
                    extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"precision": precision, "seed": seed, "config": config, "tensors": entries}
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    params = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = blob[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated buffer for {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        params[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return params, header


def save_model(path, model, vocabs=None, *, seed: int = 0, extra: dict | None = None) -> None:
    """Write a model's parameters and config; the vocabularies ride along in ``extra``."""
    extra = dict(extra or {})
    if vocabs is not None:
        extra["vocab"] = vocabs.to_json()
    save_checkpoint(path, model.arrays(), precision=model.config.precision, config=model.config.to_dict(),
                    seed=seed, extra=extra)


def load_model(path):
    """Inverse of :func:`save_model`: returns ``(model, vocabs or None, header)``."""
    from .model import ModelConfig, PointerMixtureModel
    from .tensor import Tensor
    from .vocab import Vocabularies

    arrays, header = load_checkpoint(path)
    try:
        cfg = ModelConfig(**header["config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: config does not describe a model ({exc})")
    params = {k: Tensor(v, requires_grad=True, dtype=v.dtype, name=k) for k, v in arrays.items()}
    model = PointerMixtureModel(cfg, params, seed=header.get("seed", 0))
    vocab = header.get("extra", {}).get("vocab")
    return model, (Vocabularies.from_json(vocab) if vocab else None), header
