"""Self-describing binary checkpoints.

Layout: magic ``ATFM``, format version (u32 LE), canonical JSON config
(u32 length + UTF-8 bytes), then named little-endian f64 blocks in
declaration order, each preceded by name length/name and shape. Writes are
atomic and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import AttributeClassifier, FilterConfig, FilterModel, SpeakerHead
from .seeding import stream

MAGIC = b"ATFM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, config, named_arrays):
    """Write a config dict and ordered (name, array) pairs."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = _canonical_json(config)
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    chunks.append(struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    payload = b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Read back (config, {name: array}) verifying magic and version."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        piece = data[off:off + n]
        off += n
        return piece

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an ATFM checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    order = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
        order.append(name)
    return config, arrays, order


def _restore(named_targets, arrays):
    for name, target in named_targets:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if target.shape != arrays[name].shape:
            raise CheckpointError(
                f"tensor {name!r} shape {arrays[name].shape} != expected {target.shape}")
        np.copyto(target, arrays[name])


# ---------------------------------------------------------------------------
# model-specific wrappers


def save_filter(model, path):
    config = {
        "kind": "filter",
        "filter_config": model.config.to_dict(),
        "seed": model.seed,
        "age_mean": model.age_mean,
        "age_std": model.age_std,
        "speaker_ids": (None if model.speaker_head is None
                        else model.speaker_head.speaker_ids),
    }
    save_checkpoint(path, config, model.named_tensors())


def load_filter(path):
    config, arrays, _ = load_checkpoint(path)
    if config.get("kind") != "filter":
        raise CheckpointError(f"{path}: not a filter checkpoint")
    model = FilterModel(FilterConfig.from_dict(config["filter_config"]),
                        config["seed"])
    model.age_mean = config["age_mean"]
    model.age_std = config["age_std"]
    if config["speaker_ids"] is not None:
        head = SpeakerHead(config["speaker_ids"], model.config.input_dim,
                           stream(config["seed"], "speaker-head-init"))
        head.freeze()
        model.speaker_head = head
    _restore([(n, a) for n, a in model.named_tensors()], arrays)
    return model


def save_classifier(clf, path, extra=None):
    config = {
        "kind": "classifier",
        "input_dim": clf.mlp.blocks[0][0].weight.values.shape[0],
        "attribute_kind": clf.attribute_kind,
        "dropout": clf.dropout,
        "hidden": [lin.weight.values.shape[1] for lin, _ in clf.mlp.blocks],
        "label_mean": clf.label_mean,
        "label_std": clf.label_std,
        "extra": extra or {},
    }
    named = [(p.name, p.values) for p in clf.parameters()] + clf.buffers()
    save_checkpoint(path, config, named)


def load_classifier(path):
    config, arrays, _ = load_checkpoint(path)
    if config.get("kind") != "classifier":
        raise CheckpointError(f"{path}: not a classifier checkpoint")
    clf = AttributeClassifier(config["input_dim"], config["attribute_kind"],
                              np.random.default_rng(0),
                              dropout=config["dropout"],
                              hidden=tuple(config["hidden"]))
    clf.label_mean = config["label_mean"]
    clf.label_std = config["label_std"]
    named = [(p.name, p.values) for p in clf.parameters()] + clf.buffers()
    _restore(named, arrays)
    return clf, config["extra"]


def save_speaker_head(head, path):
    config = {"kind": "speaker_head", "speaker_ids": head.speaker_ids,
              "feature_dim": head.weight.values.shape[1]}
    save_checkpoint(path, config, [(head.weight.name, head.weight.values)])


def load_speaker_head(path):
    config, arrays, _ = load_checkpoint(path)
    if config.get("kind") != "speaker_head":
        raise CheckpointError(f"{path}: not a speaker-head checkpoint")
    head = SpeakerHead(config["speaker_ids"], config["feature_dim"],
                       np.random.default_rng(0))
    head.freeze()
    _restore([(head.weight.name, head.weight.values)], arrays)
    return head
