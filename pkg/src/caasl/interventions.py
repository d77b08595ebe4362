"""Typed intervention designs shared by the synthetic and gene-expression simulators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KIND_NONE = "none"
KIND_DO = "do"
KIND_SHIFT = "shift"
KIND_KNOCKOUT = "knockout"
KIND_KNOCKDOWN = "knockdown"

VALID_KINDS = (KIND_NONE, KIND_DO, KIND_SHIFT, KIND_KNOCKOUT, KIND_KNOCKDOWN)

# Kinds whose per-target values matter; knockout/knockdown are value-free.
VALUED_KINDS = (KIND_DO, KIND_SHIFT)


@dataclass(frozen=True)
class Intervention:
    """A design: which variables are targeted, and with what values.

    ``targets`` is a length-d 0/1 mask and ``values`` a length-d vector;
    values are ignored unless ``kind`` is "do" or "shift".  An all-zero
    mask with kind "none" denotes an observational draw.
    """

    kind: str
    targets: np.ndarray
    values: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        targets = np.asarray(self.targets, dtype=np.int8)
        object.__setattr__(self, "targets", targets)
        if self.values is None:
            object.__setattr__(self, "values", np.zeros(targets.shape[0]))
        else:
            values = np.asarray(self.values, dtype=float)
            if values.shape != targets.shape:
                raise ValueError(
                    f"targets shape {targets.shape} != values shape {values.shape}"
                )
            object.__setattr__(self, "values", values)

    @property
    def d(self) -> int:
        return int(self.targets.shape[0])

    @property
    def target_indices(self) -> np.ndarray:
        return np.flatnonzero(self.targets)

    def is_observational(self) -> bool:
        return self.kind == KIND_NONE or not self.targets.any()

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "targets": self.targets.astype(int).tolist(),
            "values": np.asarray(self.values, dtype=float).tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "Intervention":
        return Intervention(
            kind=obj["kind"],
            targets=np.asarray(obj["targets"], dtype=np.int8),
            values=np.asarray(obj["values"], dtype=float),
        )

    @staticmethod
    def observational(d: int) -> "Intervention":
        return Intervention(KIND_NONE, np.zeros(d, dtype=np.int8), np.zeros(d))
