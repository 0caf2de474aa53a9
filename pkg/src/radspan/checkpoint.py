"""Single-file model container.

Layout::

    # key: value            provenance header lines (see artifacts)
    RADSPAN-CHECKPOINT 1
    <byte length of metadata>
    <metadata JSON>
    <raw tensor data>

The metadata holds the system name, vocabulary, label schema, encoder and
training configuration, and an index of tensors (name, shape, byte offset).
Tensor data is little-endian float32, in index order.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .artifacts import canonical_json, header_text
from .baseline import BertMulti
from .encoder import ContextEncoder, EncoderConfig, Vocab
from .instances import seeded_init
from .schema import LabelSchema
from .spert import TrainConfig, build_model

MAGIC = b"RADSPAN-CHECKPOINT 1\n"
SYSTEMS = ("spert", "bert-multi", "norm-phrase", "norm-sentence")


class CheckpointError(ValueError):
    pass


def new_model(system: str, vocab: Vocab, schema: LabelSchema, config: TrainConfig,
              encoder_config: EncoderConfig | None = None) -> nn.Module:
    """Fresh model for ``system``, initialised from ``config.seed``."""
    if system not in SYSTEMS:
        raise CheckpointError(f"unknown system {system!r}")
    with seeded_init(config.seed):
        encoder = ContextEncoder(vocab, encoder_config)
        if system == "bert-multi":
            return BertMulti(encoder, schema, config.dropout)
        return build_model(encoder, schema, config)


def save_checkpoint(path: str | Path, model: nn.Module, system: str, config: TrainConfig,
                    header: Mapping | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        if not tensor.is_floating_point():
            raise CheckpointError(f"tensor {name} is not floating point")
        data = tensor.detach().to(torch.float32).cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    meta = {
        "system": system,
        "vocab": list(model.encoder.vocab.pieces),
        "schema": model.schema.to_dict(),
        "encoder": asdict(model.encoder.cfg),
        "config": config.to_dict(),
        "header": dict(header or {}),
        "tensors": index,
    }
    meta_bytes = canonical_json(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(header_text(header or {}).encode("utf-8"))
        f.write(MAGIC)
        f.write(f"{len(meta_bytes)}\n".encode("ascii"))
        f.write(meta_bytes + b"\n")
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    pos = 0
    while raw.startswith(b"#", pos):
        pos = raw.index(b"\n", pos) + 1
    if not raw.startswith(MAGIC, pos):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos += len(MAGIC)
    end = raw.index(b"\n", pos)
    n = int(raw[pos:end])
    pos = end + 1
    meta = json.loads(raw[pos:pos + n].decode("utf-8"))
    pos += n + 1
    tensors = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = pos + entry["offset"]
        if start + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return meta, tensors


def load_checkpoint(path: str | Path, schema: LabelSchema | None = None):
    """Rebuild ``(model, system, config, metadata)``.

    When ``schema`` is given it must equal the checkpoint's schema.
    """
    meta, tensors = read_checkpoint(path)
    saved_schema = LabelSchema.from_dict(meta["schema"])
    if schema is not None and schema != saved_schema:
        raise CheckpointError("checkpoint was trained with a different label schema")
    config = TrainConfig.from_dict(meta["config"])
    model = new_model(meta["system"], Vocab(tuple(meta["vocab"])), saved_schema, config,
                      EncoderConfig(**meta["encoder"]))
    expected = model.state_dict()
    if set(expected) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"shape mismatch for {name}")
    model.load_state_dict(tensors)
    model.eval()
    return model, meta["system"], config, meta
