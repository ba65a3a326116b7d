"""Named parameter registry with component tags and freeze plans.

Every trainable tensor in the model belongs to exactly one component tag.
Tuning regimes are expressed as sets of trainable tags; applying a regime
only flips ``requires_grad`` flags and never mutates values.
"""

from __future__ import annotations

import hashlib
import re
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional

import torch
from torch import nn

COMPONENT_TAGS = (
    "vit",
    "cnn",
    "cba",
    "adapter",
    "prompt_encoder",
    "mask_decoder",
    "apg",
    "fusion",
)

# Ordered name-pattern rules; first match wins. Adapter and CBA parameters
# live inside the ViT branch, so their rules must precede the catch-all.
_TAG_RULES: tuple[tuple[re.Pattern, str], ...] = tuple(
    (re.compile(p), t)
    for p, t in [
        (r"^vit\.position_adapter\.", "adapter"),
        (r"^vit\.first_adapter\.", "adapter"),
        (r"^vit\.blocks\.\d+\.adapter\.", "adapter"),
        (r"^vit\.blocks\.\d+\.cba(_norm)?\.", "cba"),
        (r"^vit\.", "vit"),
        (r"^cnn\.", "cnn"),
        (r"^fusion\.", "fusion"),
        (r"^prompt_encoder\.", "prompt_encoder"),
        (r"^mask_decoder\.", "mask_decoder"),
        (r"^apg\.", "apg"),
    ]
)

# Which tags train under each regime. The ViT backbone, prompt encoder and
# mask decoder are frozen in every regime.
FREEZE_PLANS: dict[str, frozenset[str]] = {
    "samus_adapt": frozenset({"adapter", "cnn", "cba", "fusion"}),
    "autosamus_apg_only": frozenset({"apg"}),
    "autosamus_full": frozenset({"apg", "adapter", "cnn", "cba", "fusion"}),
}

REGIMES = tuple(FREEZE_PLANS)


class RegistryError(ValueError):
    pass


def resolve_tag(name: str) -> str:
    for pattern, tag in _TAG_RULES:
        if pattern.match(name):
            return tag
    raise RegistryError(f"parameter {name!r} matches no component tag rule")


@dataclass
class RegistryEntry:
    param: nn.Parameter
    tag: str

    @property
    def trainable(self) -> bool:
        return self.param.requires_grad


class ParamRegistry:
    """Map from hierarchical parameter name to (tensor, component tag, trainable)."""

    def __init__(self, entries: "OrderedDict[str, RegistryEntry]"):
        self.entries = entries

    @classmethod
    def from_model(cls, model: nn.Module) -> "ParamRegistry":
        entries: OrderedDict[str, RegistryEntry] = OrderedDict()
        for name, param in model.named_parameters():
            entries[name] = RegistryEntry(param=param, tag=resolve_tag(name))
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self, tag: Optional[str] = None) -> list[str]:
        if tag is None:
            return list(self.entries)
        return [n for n, e in self.entries.items() if e.tag == tag]

    def tags_present(self) -> set[str]:
        return {e.tag for e in self.entries.values()}

    def trainable_names(self) -> list[str]:
        return [n for n, e in self.entries.items() if e.trainable]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [e.param for e in self.entries.values() if e.trainable]

    def count_params(self, tag: Optional[str] = None) -> int:
        return sum(
            e.param.numel()
            for e in self.entries.values()
            if tag is None or e.tag == tag
        )

    def set_trainable_tags(self, tags: Iterable[str]) -> None:
        tags = set(tags)
        unknown = tags - set(COMPONENT_TAGS)
        if unknown:
            raise RegistryError(f"unknown component tags: {sorted(unknown)}")
        for entry in self.entries.values():
            entry.param.requires_grad_(entry.tag in tags)

    def state_hashes(self) -> dict[str, str]:
        """SHA-256 of each parameter's raw value bytes (shape/dtype included)."""
        out = {}
        for name, entry in self.entries.items():
            t = entry.param.detach().cpu()
            h = hashlib.sha256()
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
            out[name] = h.hexdigest()
        return out


def apply_freeze_plan(registry: ParamRegistry, regime: str) -> ParamRegistry:
    """Set trainability per tuning regime; returns the same registry.

    samus_adapt trains the adapters, CNN branch, CBA and fusion;
    autosamus_apg_only trains only the auto prompt generator;
    autosamus_full trains both sets. Everything else stays frozen.
    """
    if regime not in FREEZE_PLANS:
        raise RegistryError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if len(registry) == 0:
        raise RegistryError("cannot apply a freeze plan to an empty registry")
    registry.set_trainable_tags(FREEZE_PLANS[regime])
    return registry
