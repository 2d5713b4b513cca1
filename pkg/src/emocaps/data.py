"""Dialogues, manifests, splits and the synthetic dataset generator."""
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import emof
from .errors import (DataError, ExtentMismatchError, FormatError, MissingFileError,
                     UnknownLabelError, UsageError)
from .tensor import Rng

FEATURE_KEYS = (("text", "text_feat"), ("audio", "audio_feat"), ("visual", "visual_feat"))


@dataclass
class Utterance:
    id: str
    speaker: str
    text_feat: np.ndarray    # (d_t,)
    audio_feat: np.ndarray   # (T_a, d_a)
    visual_feat: np.ndarray  # (T_v, d_v)
    label: int | None = None


@dataclass
class Dialogue:
    id: str
    utterances: list

    def __len__(self):
        return len(self.utterances)


@dataclass(frozen=True)
class LabelSet:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise UsageError(f"duplicate label names in {list(self.names)}")
        if len(self.names) < 2:
            raise UsageError("a label set needs at least two labels")

    def __len__(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownLabelError(f"unknown label {name!r}") from None


def feature_dims(dialogues):
    """(text, audio, visual) feature extents of the first utterance."""
    u = dialogues[0].utterances[0]
    return u.text_feat.shape[-1], u.audio_feat.shape[-1], u.visual_feat.shape[-1]


def check_dialogues(dialogues, n_classes=None, dims=None):
    if not dialogues:
        raise UsageError("no dialogues")
    dims = dims or feature_dims(dialogues)
    for d in dialogues:
        if not d.utterances:
            raise DataError(f"dialogue {d.id}: no utterances")
        for u in d.utterances:
            got = (u.text_feat.shape[-1], u.audio_feat.shape[-1], u.visual_feat.shape[-1])
            if got != tuple(dims):
                raise ExtentMismatchError(
                    f"dialogue {d.id} utterance {u.id}: feature extents {got} do not match {tuple(dims)}")
            if u.text_feat.ndim != 1 or u.audio_feat.ndim != 2 or u.visual_feat.ndim != 2:
                raise ExtentMismatchError(f"dialogue {d.id} utterance {u.id}: bad feature ranks")
            if u.label is not None and n_classes is not None and not 0 <= u.label < n_classes:
                raise UnknownLabelError(
                    f"dialogue {d.id} utterance {u.id}: label {u.label} outside 0..{n_classes - 1}")
    return dims


# ---------------------------------------------------------------- manifest I/O

def _load_feature(base, rel, rank, where):
    if not isinstance(rel, str):
        raise FormatError(f"{where}: feature path must be a string, got {rel!r}")
    path = os.path.join(base, rel)
    try:
        arr = emof.load(path)
    except MissingFileError:
        raise MissingFileError(f"{where}: missing feature file {path}") from None
    except FormatError as exc:
        raise FormatError(f"{where}: {exc}") from None
    if rank == 2 and arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != rank:
        raise ExtentMismatchError(f"{where}: expected a rank-{rank} tensor in {path}, got shape {arr.shape}")
    return arr


def load_dataset(manifest_path):
    """Read a JSON manifest and its EMOF feature files.

    Returns ``(dialogues, LabelSet)``. Feature paths are relative to the
    manifest's directory. An optional ``dims`` object pins the expected
    ``text``/``audio``/``visual`` extents; otherwise the first utterance does.
    """
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise MissingFileError(f"missing manifest {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "labels" not in doc or "dialogues" not in doc:
        raise FormatError(f"manifest {manifest_path}: needs 'labels' and 'dialogues'")
    labels = LabelSet(doc["labels"])
    if not doc["dialogues"]:
        raise UsageError("no dialogues")
    base = os.path.dirname(os.path.abspath(manifest_path))
    dims = doc.get("dims")
    if dims is not None:
        dims = (int(dims["text"]), int(dims["audio"]), int(dims["visual"]))
    dialogues = []
    for d in doc["dialogues"]:
        utts = []
        for u in d.get("utterances", []):
            where = f"dialogue {d.get('id')} utterance {u.get('id')}"
            try:
                feats = {k: _load_feature(base, u[key], 1 if k == "text" else 2, where)
                         for k, key in FEATURE_KEYS}
            except KeyError as exc:
                raise FormatError(f"{where}: missing field {exc}") from None
            name = u.get("label")
            if name is None:
                label = None
            elif name in labels.names:
                label = labels.names.index(name)
            else:
                raise UnknownLabelError(f"{where}: unknown label {name!r}")
            utts.append(Utterance(str(u["id"]), str(u.get("speaker", "")), feats["text"],
                                  feats["audio"], feats["visual"], label))
        dialogues.append(Dialogue(str(d["id"]), utts))
    check_dialogues(dialogues, len(labels), dims)
    return dialogues, labels


def save_dataset(dialogues, labels, directory, manifest_name="manifest.json"):
    """Write EMOF feature files plus a manifest; returns the manifest path."""
    check_dialogues(dialogues, len(labels))
    os.makedirs(directory, exist_ok=True)
    text_dim, audio_dim, visual_dim = feature_dims(dialogues)
    doc = {"labels": list(labels.names),
           "dims": {"text": text_dim, "audio": audio_dim, "visual": visual_dim},
           "dialogues": []}
    for d in dialogues:
        entry = {"id": d.id, "utterances": []}
        for u in d.utterances:
            rec = {"id": u.id, "speaker": u.speaker,
                   "label": None if u.label is None else labels.names[u.label]}
            for k, key in FEATURE_KEYS:
                rel = os.path.join("features", d.id, f"{u.id}.{k}.emof")
                emof.save(os.path.join(directory, rel), getattr(u, key))
                rec[key] = rel
            entry["utterances"].append(rec)
        doc["dialogues"].append(entry)
    path = os.path.join(directory, manifest_name)
    emof.atomic_write_text(path, json.dumps(doc, indent=1) + "\n")
    return path


# ---------------------------------------------------------------- splits

def split(dialogues, fractions, seed):
    """Partition whole dialogues into (train, dev, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0,
                                                                      abs_tol=1e-9):
        raise UsageError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(dialogues)
    order = Rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_dev = min(n - n_train, int(round(fractions[1] * n)))
    if fractions[2] == 0:
        n_dev = n - n_train
    parts = (order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:])
    return tuple([dialogues[i] for i in sorted(p)] for p in parts)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthSpec:
    """Recipe for a synthetic dataset.

    Each utterance carries a planted class; every modality with a positive
    ``signal`` scale gets that class's offset vector plus Gaussian noise,
    the rest get noise only. With probability ``context_flip`` an
    utterance's label copies the previous label instead of its planted class.
    ``offsets`` may pin the per-class offset matrices (``(m, d)`` per modality).
    """
    n_dialogues: int = 200
    min_utterances: int = 4
    max_utterances: int = 12
    n_classes: int = 4
    text_dim: int = 16
    audio_dim: int = 16
    visual_dim: int = 16
    audio_len: int = 1
    visual_len: int = 1
    signal: dict = field(default_factory=lambda: {"text": 1.0, "audio": 1.0, "visual": 1.0})
    noise: float = 0.5
    context_flip: float = 0.0
    seed: int = 0
    offsets: dict | None = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("offsets") is not None:
            d["offsets"] = {k: np.asarray(v, dtype=np.float64) for k, v in d["offsets"].items()}
        return cls(**d)


def _class_offsets(spec, rng):
    dims = {"text": spec.text_dim, "audio": spec.audio_dim, "visual": spec.visual_dim}
    offsets = {}
    for k in ("text", "audio", "visual"):
        s = float(spec.signal.get(k, 0.0))
        if spec.offsets is not None and k in spec.offsets:
            off = np.asarray(spec.offsets[k], dtype=np.float64)
            if off.shape != (spec.n_classes, dims[k]):
                raise UsageError(f"synth: {k} offsets have shape {off.shape}, "
                                 f"expected {(spec.n_classes, dims[k])}")
        else:
            off = rng.normal((spec.n_classes, dims[k]))
        offsets[k] = s * off
    return offsets


def generate_synthetic(spec):
    """Build ``(dialogues, LabelSet)`` deterministically from ``spec``."""
    if spec.n_dialogues < 1 or spec.n_classes < 2:
        raise UsageError("synth: need at least one dialogue and two classes")
    if not 1 <= spec.min_utterances <= spec.max_utterances:
        raise UsageError("synth: utterance range must satisfy 1 <= min <= max")
    if spec.noise < 0 or not 0 <= spec.context_flip <= 1:
        raise UsageError("synth: noise must be >= 0 and context_flip within [0, 1]")
    if min(spec.text_dim, spec.audio_dim, spec.visual_dim, spec.audio_len, spec.visual_len) < 1:
        raise UsageError("synth: feature extents must be positive")
    rng = Rng(spec.seed)
    offsets = _class_offsets(spec, rng)
    carrying = [k for k in offsets if spec.signal.get(k, 0.0) > 0]
    if not carrying:
        raise UsageError("synth: no modality carries signal")
    for k in carrying:
        rows = offsets[k]
        for a in range(spec.n_classes):
            for b in range(a + 1, spec.n_classes):
                if np.array_equal(rows[a], rows[b]):
                    raise UsageError(f"synth: {k} offsets of classes {a} and {b} are identical")
    dialogues = []
    for j in range(spec.n_dialogues):
        n = int(rng.integers(spec.min_utterances, spec.max_utterances + 1))
        planted = rng.integers(0, spec.n_classes, size=n)
        flips = rng.random(n) < spec.context_flip
        utts = []
        prev = None
        for i in range(n):
            c = int(planted[i])
            label = prev if (prev is not None and flips[i]) else c
            text = offsets["text"][c] + rng.normal((spec.text_dim,), spec.noise)
            audio = offsets["audio"][c] + rng.normal((spec.audio_len, spec.audio_dim), spec.noise)
            visual = offsets["visual"][c] + rng.normal((spec.visual_len, spec.visual_dim), spec.noise)
            utts.append(Utterance(f"d{j:04d}_u{i:02d}", "AB"[i % 2], text.astype(np.float32),
                                  audio.astype(np.float32), visual.astype(np.float32), label))
            prev = label
        dialogues.append(Dialogue(f"d{j:04d}", utts))
    labels = LabelSet([f"class{c}" for c in range(spec.n_classes)])
    return dialogues, labels
