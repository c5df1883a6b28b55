"""Checkpoint container: JSON manifest followed by a raw tensor payload.

Layout::

    IRVULN-CKPT 1\\n
    <manifest byte length, decimal>\\n
    <manifest: UTF-8 JSON>
    <payload: little-endian IEEE-754 tensors, back to back in manifest order>

Each manifest tensor entry records name, shape, dtype and its byte offset
into the payload. The model config and, optionally, the vocabulary and
preprocessing settings travel in the manifest so a checkpoint is
self-contained for evaluation and prediction.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .errors import DataError
from .io import write_atomic
from .model import ModelConfig, TransformerModel
from .preprocess import PreprocessConfig
from .tokenizer import Vocabulary

MAGIC = b"IRVULN-CKPT 1\n"


class CheckpointError(DataError):
    pass


def dumps(model: TransformerModel, vocab: Vocabulary | None = None,
          preprocess: PreprocessConfig | None = None, extra: dict | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, arr in model.params.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "config": model.config.to_dict(),
        "precision": model.precision,
        "tensors": tensors,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "preprocess": asdict(preprocess) if preprocess is not None else None,
        "extra": extra or {},
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    return MAGIC + str(len(text)).encode("ascii") + b"\n" + text + b"".join(chunks)


def save(path: str | os.PathLike, model: TransformerModel, vocab: Vocabulary | None = None,
         preprocess: PreprocessConfig | None = None, extra: dict | None = None) -> None:
    write_atomic(path, dumps(model, vocab, preprocess, extra))


def loads(data: bytes) -> tuple[TransformerModel, dict]:
    """Parse a checkpoint. Returns the model and the manifest, with ``vocab``
    and ``preprocess`` already rebuilt into objects (or None)."""
    if not data.startswith(MAGIC):
        raise CheckpointError("not an irvuln checkpoint (bad magic)")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        mlen = int(rest[:nl])
        manifest = json.loads(rest[nl + 1:nl + 1 + mlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    payload = memoryview(rest)[nl + 1 + mlen:]
    params = {}
    for t in manifest["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"payload truncated at tensor {t['name']}")
        arr = np.frombuffer(payload[t["offset"]:end], dtype=np.dtype(t["dtype"]))
        params[t["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(t["shape"])
    model = TransformerModel(ModelConfig(**manifest["config"]), params)
    if manifest.get("vocab") is not None:
        manifest["vocab"] = Vocabulary(manifest["vocab"])
    if manifest.get("preprocess") is not None:
        manifest["preprocess"] = PreprocessConfig(**manifest["preprocess"])
    return model, manifest


def load(path: str | os.PathLike) -> tuple[TransformerModel, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
