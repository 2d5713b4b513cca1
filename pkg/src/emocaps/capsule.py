"""Emotion capsule: U_t, E_t, E_v, E_a concatenated, with modality masking."""
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import DimensionError, UsageError

COMPONENTS = ("sentence", "text", "visual", "audio")
ALL_MODALITIES = frozenset(("text", "audio", "visual"))

# rows of the multimodal ablation table, in its printed order
ABLATION_SETTINGS = (
    ("T", frozenset({"text"})),
    ("A", frozenset({"audio"})),
    ("V", frozenset({"visual"})),
    ("T+A", frozenset({"text", "audio"})),
    ("T+V", frozenset({"text", "visual"})),
    ("T+V+A", ALL_MODALITIES),
)

_SHORT = {"t": "text", "text": "text", "a": "audio", "audio": "audio",
          "v": "visual", "visual": "visual", "video": "visual"}


def parse_modalities(spec):
    """``"T+V"`` or ``"text+visual"`` -> frozenset of modality names."""
    names = set()
    for part in spec.replace(" ", "").split("+"):
        try:
            names.add(_SHORT[part.lower()])
        except KeyError:
            raise UsageError(f"unknown modality {part!r} in {spec!r}")
    return frozenset(names)


def setting_name(keep):
    keep = frozenset(keep)
    for name, s in ABLATION_SETTINGS:
        if s == keep:
            return name
    raise UsageError(f"no ablation setting for {sorted(keep)}")


@dataclass
class EmotionCapsule:
    """Fused vector(s) of shape ``(..., sum(extents))`` plus its layout."""
    vector: tc.Tensor
    extents: tuple
    present_modalities: frozenset = ALL_MODALITIES

    def bounds(self, component):
        k = COMPONENTS.index(component)
        start = sum(self.extents[:k])
        return start, start + self.extents[k]

    def component(self, name):
        start, stop = self.bounds(name)
        return self.vector.data[..., start:stop]


def build_capsule(U_t, E_t, E_v, E_a, extents=None):
    parts = [tc.as_tensor(x) for x in (U_t, E_t, E_v, E_a)]
    got = tuple(p.shape[-1] for p in parts)
    if extents is not None and tuple(extents) != got:
        raise DimensionError(f"capsule component extents {got} do not match configured {tuple(extents)}")
    return EmotionCapsule(tc.concat_last_axis(parts), got)


def modality_mask(extents, keep):
    """0/1 vector over the capsule width keeping the components of ``keep``.

    The sentence vector travels with the text modality.
    """
    keep = frozenset(keep)
    if not keep:
        raise UsageError("mask_modalities: keep set is empty")
    bad = keep - ALL_MODALITIES
    if bad:
        raise UsageError(f"mask_modalities: unknown modalities {sorted(bad)}")
    owner = {"sentence": "text", "text": "text", "visual": "visual", "audio": "audio"}
    return np.concatenate([np.full(n, 1.0 if owner[c] in keep else 0.0)
                           for c, n in zip(COMPONENTS, extents)])


def mask_modalities(capsule, keep):
    keep = frozenset(keep)
    mask = modality_mask(capsule.extents, keep).astype(capsule.vector.dtype)
    vec = tc.mul(capsule.vector, mask)
    return EmotionCapsule(vec, capsule.extents, capsule.present_modalities & keep)
