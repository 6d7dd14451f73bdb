"""Layer addressing, attention traces, and forward-pass interventions.

These are the instrumentation primitives of the denoising U-Net: every
residual/attention layer has a stable address, a forward pass can record
spatial features (f), self-attention maps (sa), and cross-attention maps
(ca) at any address, and replacements/transforms are applied before the
layer's downstream computation consumes the quantity.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch

from ..errors import AddressError, ParameterError, ShapeError

QUANTITIES = ("f", "sa", "ca")

_ADDR_RE = re.compile(r"^(enc(?P<eb>\d+)|mid|dec(?P<db>\d+)):(?P<layer>\d+)$")


@dataclass(frozen=True, order=True)
class LayerAddress:
    """Identifies one U-Net layer: section, block index, layer index."""

    section: str  # "encoder" | "mid" | "decoder"
    block: int
    layer: int

    def __post_init__(self):
        if self.section not in ("encoder", "mid", "decoder"):
            raise ParameterError(f"unknown section {self.section!r}")
        if self.block < 0 or self.layer < 0:
            raise ParameterError(f"negative block/layer index in {self!r}")

    def __str__(self) -> str:
        if self.section == "mid":
            return f"mid:{self.layer}"
        prefix = "enc" if self.section == "encoder" else "dec"
        return f"{prefix}{self.block}:{self.layer}"

    @classmethod
    def parse(cls, text: str) -> "LayerAddress":
        m = _ADDR_RE.match(text.strip())
        if m is None:
            raise AddressError(
                f"bad layer address {text!r}; expected enc<b>:<l>, mid:<l>, or dec<b>:<l>"
            )
        layer = int(m.group("layer"))
        if m.group("eb") is not None:
            return cls("encoder", int(m.group("eb")), layer)
        if m.group("db") is not None:
            return cls("decoder", int(m.group("db")), layer)
        return cls("mid", 0, layer)


def addr(text: str) -> LayerAddress:
    """Shorthand parser: addr("dec1:2")."""
    return LayerAddress.parse(text)


class AttentionTrace:
    """Recorded quantities from one denoising forward pass (one timestep).

    Maps are stored per head; self/cross-attention rows are post-softmax and
    sum to one. ``geometry`` remembers each recorded layer's spatial size so
    flattened position axes can be unflattened later.
    """

    def __init__(self):
        self.f: dict[LayerAddress, torch.Tensor] = {}
        self.sa: dict[LayerAddress, torch.Tensor] = {}
        self.ca: dict[LayerAddress, torch.Tensor] = {}
        self.geometry: dict[LayerAddress, tuple[int, int]] = {}

    def store(self, address: LayerAddress, quantity: str, value: torch.Tensor, hw: tuple[int, int]):
        getattr(self, quantity)[address] = value
        self.geometry[address] = hw

    def get(self, address: LayerAddress, quantity: str) -> torch.Tensor:
        if quantity not in QUANTITIES:
            raise ParameterError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
        table = getattr(self, quantity)
        if address not in table:
            raise AddressError(f"trace has no {quantity!r} record at {address}")
        return table[address]

    def has(self, address: LayerAddress, quantity: str) -> bool:
        return address in getattr(self, quantity)

    def records(self) -> list[tuple[LayerAddress, str]]:
        out = []
        for q in QUANTITIES:
            out.extend((a, q) for a in getattr(self, q))
        return sorted(out, key=lambda item: (str(item[0]), item[1]))


# transform_ca callback: (address, ca[heads, hw, tokens], (h, w)) -> same-shaped tensor
CaTransform = Callable[[LayerAddress, torch.Tensor, tuple[int, int]], torch.Tensor]


@dataclass
class InterventionSet:
    """Requests applied during one forward pass.

    record: set of (address, quantity) to capture into the returned trace.
    replace_f / replace_sa: tensors substituted before downstream use.
    transform_ca: applied to every cross-attention map after softmax and
    before the attention-weighted sum.
    """

    record: set[tuple[LayerAddress, str]] = field(default_factory=set)
    replace_f: dict[LayerAddress, torch.Tensor] = field(default_factory=dict)
    replace_sa: dict[LayerAddress, torch.Tensor] = field(default_factory=dict)
    transform_ca: CaTransform | None = None

    def is_empty(self) -> bool:
        return not (self.record or self.replace_f or self.replace_sa or self.transform_ca)

    def addresses(self) -> set[LayerAddress]:
        out = {a for a, _ in self.record}
        out.update(self.replace_f)
        out.update(self.replace_sa)
        return out

    def validate_quantities(self) -> None:
        for _, q in self.record:
            if q not in QUANTITIES:
                raise ParameterError(f"unknown record quantity {q!r}")


def merge_records(interv: InterventionSet, extra: Iterable[tuple[LayerAddress, str]]) -> InterventionSet:
    """Copy of ``interv`` with additional record requests (replacements shared)."""
    return InterventionSet(
        record=set(interv.record) | set(extra),
        replace_f=interv.replace_f,
        replace_sa=interv.replace_sa,
        transform_ca=interv.transform_ca,
    )


def check_replacement_shape(address: LayerAddress, got: torch.Tensor, want: tuple[int, ...], what: str) -> None:
    if tuple(got.shape) != want:
        raise ShapeError(f"{what} replacement at {address}: shape {tuple(got.shape)} != expected {want}")
