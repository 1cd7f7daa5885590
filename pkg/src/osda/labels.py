"""Open-set label structure shared by both domains.

The two domains carry their own label sets; the overlap ("common" labels)
drives which samples participate in the common-label alignment losses.
Every sample is encoded against a single unified index over all labels so
one classifier head covers both domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


class LabelSpaceError(ValueError):
    """Invalid label-set construction or label/domain mismatch."""


@dataclass(frozen=True)
class LabelTopology:
    """Source/target/common/specific label sets and the unified index.

    Unified order is source labels first (in given order), then labels
    appearing only in the target (in given order); this keeps checkpoints
    and exported vectors reproducible across runs.
    """

    source_labels: tuple[str, ...]
    target_labels: tuple[str, ...]
    common_labels: tuple[str, ...]
    source_specific: tuple[str, ...]
    target_specific: tuple[str, ...]
    unified: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @property
    def n_labels(self) -> int:
        return len(self.unified)

    def domain_labels(self, domain: str) -> tuple[str, ...]:
        if domain == SOURCE:
            return self.source_labels
        if domain == TARGET:
            return self.target_labels
        raise LabelSpaceError(f"unknown domain {domain!r}; expected one of {DOMAINS}")

    def domain_mask(self, domain: str) -> np.ndarray:
        """0/1 vector over the unified index marking the domain's own labels."""
        mask = np.zeros(self.n_labels, dtype=np.float64)
        for name in self.domain_labels(domain):
            mask[self.index[name]] = 1.0
        return mask

    def common_indices(self) -> np.ndarray:
        return np.array([self.index[name] for name in self.common_labels], dtype=np.int64)


@dataclass(frozen=True)
class LabelVector:
    """Multi-hot labels plus the domain mask over the unified index.

    values[i] = 1 only where mask[i] = 1: a sample can only assert labels
    its own domain defines.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise LabelSpaceError("values and mask must have identical shape")
        if np.any((self.values == 1.0) & (self.mask == 0.0)):
            raise LabelSpaceError("label asserted outside the sample's domain mask")


def build_topology(source_names, target_names) -> LabelTopology:
    """Build the label topology from the two domains' ordered label lists.

    Membership is exact, case-sensitive string equality; duplicates within a
    list and empty lists are rejected.
    """
    source_names = tuple(source_names)
    target_names = tuple(target_names)
    for tag, names in ((SOURCE, source_names), (TARGET, target_names)):
        if not names:
            raise LabelSpaceError(f"{tag} label list is empty")
        seen = set()
        for name in names:
            if name in seen:
                raise LabelSpaceError(f"duplicate label {name!r} in {tag} label list")
            seen.add(name)

    source_set = set(source_names)
    common = tuple(n for n in source_names if n in target_names)
    source_specific = tuple(n for n in source_names if n not in common)
    target_specific = tuple(n for n in target_names if n not in source_set)
    unified = source_names + target_specific
    index = {name: i for i, name in enumerate(unified)}
    return LabelTopology(
        source_labels=source_names,
        target_labels=target_names,
        common_labels=common,
        source_specific=source_specific,
        target_specific=target_specific,
        unified=unified,
        index=index,
    )


def encode_labels(names, domain: str, topology: LabelTopology) -> LabelVector:
    """Encode label names from one domain as a masked multi-hot vector."""
    domain_set = set(topology.domain_labels(domain))
    values = np.zeros(topology.n_labels, dtype=np.float64)
    for name in names:
        if name not in topology.index:
            raise LabelSpaceError(f"unknown label {name!r}")
        if name not in domain_set:
            raise LabelSpaceError(f"label {name!r} is not in the {domain} domain's label set")
        values[topology.index[name]] = 1.0
    return LabelVector(values=values, mask=topology.domain_mask(domain))


def decode_labels(vector: LabelVector, topology: LabelTopology) -> list[str]:
    """Names of the labels asserted by a vector, in unified order."""
    if vector.values.shape[0] != topology.n_labels:
        raise LabelSpaceError(
            f"vector length {vector.values.shape[0]} does not match |unified| = {topology.n_labels}"
        )
    return [topology.unified[i] for i in np.flatnonzero(vector.values == 1.0)]


def has_common_label(vector: LabelVector, topology: LabelTopology) -> bool:
    """True iff the vector asserts at least one label shared by both domains."""
    if vector.values.shape[0] != topology.n_labels:
        raise LabelSpaceError(
            f"vector length {vector.values.shape[0]} does not match |unified| = {topology.n_labels}"
        )
    common = topology.common_indices()
    if common.size == 0:
        return False
    return bool(np.any(vector.values[common] == 1.0))
