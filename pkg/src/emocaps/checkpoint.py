"""Checkpoints: a directory of EMOF tensors plus a JSON index."""
import json
import os
import shutil
import tempfile

import numpy as np

from . import emof
from .config import ModelConfig
from .data import LabelSet
from .errors import FormatError, MissingFileError
from .model import EmoCaps

FORMAT = "emocaps-checkpoint"


def save_checkpoint(model, labels, path, extra=None):
    """Write ``path/index.json`` and ``path/tensors/*.emof``; replaces ``path`` atomically."""
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".tmp-ckpt-")
    try:
        os.makedirs(os.path.join(tmp, "tensors"))
        index = {"format": FORMAT, "version": 1, "config": model.config.to_dict(),
                 "labels": list(labels.names), "tensors": {}}
        for name in sorted(model.params):
            rel = f"tensors/{name}.emof"
            emof.save(os.path.join(tmp, rel), model.params[name].data)
            index["tensors"][name] = rel
        if extra:
            index["extra"] = extra
        with open(os.path.join(tmp, "index.json"), "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)
            fh.write("\n")
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path):
    """Returns ``(EmoCaps, LabelSet)``."""
    index_path = os.path.join(path, "index.json")
    try:
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)
    except FileNotFoundError:
        raise MissingFileError(f"missing checkpoint index {index_path}") from None
    if index.get("format") != FORMAT:
        raise FormatError(f"{index_path}: not an EmoCaps checkpoint")
    config = ModelConfig.from_dict(index["config"])
    dtype = np.dtype(config.dtype)
    model = EmoCaps(config, seed=0)
    expected = set(model.params)
    stored = set(index["tensors"])
    if expected != stored:
        raise FormatError(f"{index_path}: tensor names do not match the model "
                          f"(missing {sorted(expected - stored)}, extra {sorted(stored - expected)})")
    for name, rel in index["tensors"].items():
        arr = emof.load(os.path.join(path, rel))
        t = model.params[name]
        if arr.shape != t.shape:
            raise FormatError(f"{index_path}: tensor {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(dtype)
    return model, LabelSet(index["labels"])

