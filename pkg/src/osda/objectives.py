"""The five loss terms and their weighted combination.

All expectations are per-group minibatch means; an empty group contributes
exactly 0 to its term. Probabilities are clamped to [EPS, 1 - EPS] before
any logarithm. Wherever the recognizer output weights another loss it is
treated as a constant: gradients never flow into the recognizer through
the discriminator losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import Batch
from .labels import LabelTopology, has_common_label

EPS = 1e-7


class ObjectiveError(ValueError):
    """Malformed loss inputs (e.g. labeled loss fed unlabeled samples)."""


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for the recognizer and discriminator terms."""

    lambda_r: float = 1.0
    lambda_dg: float = 1.0
    lambda_dc_label: float = 1.0
    lambda_dc_un: float = 1.0

    def validate(self) -> None:
        if min(self.lambda_r, self.lambda_dg, self.lambda_dc_label, self.lambda_dc_un) < 0:
            raise ObjectiveError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Scalar values of the five terms and the combined objective."""

    l_gy: float
    l_r: float
    l_dg: float
    l_dc_label: float
    l_dc_un: float
    total: float
    n_source: int = 0
    n_target_labeled: int = 0
    n_target_unlabeled: int = 0

    def terms(self) -> dict[str, float]:
        return {
            "l_gy": self.l_gy,
            "l_r": self.l_r,
            "l_dg": self.l_dg,
            "l_dc_label": self.l_dc_label,
            "l_dc_un": self.l_dc_un,
            "total": self.total,
        }


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, EPS, 1.0 - EPS))


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=torch.float64)


def _mean_or_zero(t: torch.Tensor) -> torch.Tensor:
    return t.mean() if t.numel() > 0 else _zero()


def loss_classifier(y_hat: torch.Tensor, y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked multi-label binary cross-entropy.

    Mean over samples of the mean over mask-active labels; mask-inactive
    labels contribute exactly zero loss and zero gradient.
    """
    if y_hat.numel() == 0:
        return _zero()
    if y_hat.shape != y.shape or y.shape != mask.shape:
        raise ObjectiveError("y_hat, y and mask must share one (N, n_labels) shape")
    bce = -(y * _clamped_log(y_hat) + (1.0 - y) * _clamped_log(1.0 - y_hat))
    per_sample = (bce * mask).sum(dim=1) / mask.sum(dim=1)
    return per_sample.mean()


def loss_domain_general(dg_source: torch.Tensor, dg_target_labeled: torch.Tensor,
                        dg_target_unlabeled: torch.Tensor,
                        unlabeled_weight: torch.Tensor) -> torch.Tensor:
    """General domain discriminator loss; unlabeled samples are weighted by
    the (detached) recognizer output."""
    w = unlabeled_weight.detach()
    return (
        _mean_or_zero(-_clamped_log(dg_source))
        + _mean_or_zero(-_clamped_log(1.0 - dg_target_labeled))
        + _mean_or_zero(-w * _clamped_log(1.0 - dg_target_unlabeled))
    )


def loss_domain_common_labeled(dc_source: torch.Tensor, source_has_common: torch.Tensor,
                               dc_target_labeled: torch.Tensor,
                               target_has_common: torch.Tensor) -> torch.Tensor:
    """Common-label discriminator loss over labeled samples.

    Only samples with at least one common label participate; everything
    else is excluded from the means entirely.
    """
    return (
        _mean_or_zero(-_clamped_log(dc_source[source_has_common]))
        + _mean_or_zero(-_clamped_log(1.0 - dc_target_labeled[target_has_common]))
    )


def loss_domain_common_unlabeled(dc_target_unlabeled: torch.Tensor,
                                 unlabeled_weight: torch.Tensor) -> torch.Tensor:
    """Common-label discriminator loss over unlabeled samples, weighted by
    the (detached) recognizer output."""
    w = unlabeled_weight.detach()
    return _mean_or_zero(-w * _clamped_log(1.0 - dc_target_unlabeled))


def loss_recognizer(r_hat: torch.Tensor, has_common: torch.Tensor) -> torch.Tensor:
    """Recognizer cross-entropy over the pooled labeled samples: one mean
    over samples with a common label, one over those without."""
    return (
        _mean_or_zero(-_clamped_log(r_hat[has_common]))
        + _mean_or_zero(-_clamped_log(1.0 - r_hat[~has_common]))
    )


def total_objective(l_gy, l_r, l_dg, l_dc_label, l_dc_un, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the five terms.

    The discriminator probabilities are produced through the reversal
    layer, so minimizing this single scalar both trains the discriminators
    on their own cross-entropy and pushes the extractor the opposite way.
    """
    weights.validate()
    return (
        l_gy
        + weights.lambda_r * l_r
        + weights.lambda_dg * l_dg
        + weights.lambda_dc_label * l_dc_label
        + weights.lambda_dc_un * l_dc_un
    )


# ---------------------------------------------------------------------------
# Batch-level assembly
# ---------------------------------------------------------------------------


@dataclass
class GroupTensors:
    images: torch.Tensor           # (N, C, H, W) float64
    labels: torch.Tensor | None    # (N, n_labels) or None for unlabeled
    mask: torch.Tensor | None
    has_common: torch.Tensor | None  # bool (N,)

    @property
    def n(self) -> int:
        return self.images.shape[0]


def group_tensors(samples, topology: LabelTopology, labeled: bool) -> GroupTensors:
    """Stack a sample group into training tensors.

    The unlabeled group yields images only; labels never cross this
    boundary for it.
    """
    if len(samples) == 0:
        empty = torch.zeros((0, 1, 1, 1), dtype=torch.float64)
        return GroupTensors(images=empty, labels=None, mask=None, has_common=None)
    imgs = np.ascontiguousarray(
        np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    )
    images = torch.from_numpy(imgs)
    if not labeled:
        return GroupTensors(images=images, labels=None, mask=None, has_common=None)
    for s in samples:
        if s.labels is None:
            raise ObjectiveError("labeled group contains a sample without labels")
    labels = torch.from_numpy(np.stack([s.labels.values for s in samples]))
    mask = torch.from_numpy(np.stack([s.labels.mask for s in samples]))
    flags = torch.tensor(
        [has_common_label(s.labels, topology) for s in samples], dtype=torch.bool
    )
    return GroupTensors(images=images, labels=labels, mask=mask, has_common=flags)


def compute_losses(model, batch: Batch, topology: LabelTopology, weights: LossWeights,
                   enable_dg: bool = True, enable_dc: bool = True,
                   enable_r: bool = True) -> tuple[torch.Tensor, LossReport]:
    """Forward all three groups and evaluate the combined objective.

    Disabling the recognizer (the plain adversarial ablation) replaces its
    weighting of unlabeled samples with 1.
    """
    src = group_tensors(batch.source, topology, labeled=True)
    tl = group_tensors(batch.target_labeled, topology, labeled=True)
    tu = group_tensors(batch.target_unlabeled, topology, labeled=False)

    trace_src = model(src.images) if src.n else None
    trace_tl = model(tl.images) if tl.n else None
    trace_tu = model(tu.images) if tu.n else None

    def cat(parts):
        parts = [p for p in parts if p is not None]
        return torch.cat(parts) if parts else torch.zeros((0,), dtype=torch.float64)

    y_hat = cat([trace_src.y_hat if trace_src else None, trace_tl.y_hat if trace_tl else None])
    y = cat([src.labels, tl.labels])
    mask = cat([src.mask, tl.mask])
    l_gy = loss_classifier(y_hat, y, mask) if y_hat.numel() else _zero()

    empty = torch.zeros((0,), dtype=torch.float64)
    dg_s = trace_src.dg_hat if trace_src else empty
    dg_tl = trace_tl.dg_hat if trace_tl else empty
    dg_tu = trace_tu.dg_hat if trace_tu else empty
    dc_s = trace_src.dc_hat if trace_src else empty
    dc_tl = trace_tl.dc_hat if trace_tl else empty
    dc_tu = trace_tu.dc_hat if trace_tu else empty

    if enable_r and trace_tu is not None:
        unlabeled_weight = trace_tu.r_hat
    else:
        unlabeled_weight = torch.ones_like(dg_tu)

    r_labeled = cat([trace_src.r_hat if trace_src else None, trace_tl.r_hat if trace_tl else None])
    flags = cat([
        src.has_common if src.has_common is not None else None,
        tl.has_common if tl.has_common is not None else None,
    ]).to(torch.bool)
    l_r = loss_recognizer(r_labeled, flags) if (enable_r and r_labeled.numel()) else _zero()

    l_dg = (
        loss_domain_general(dg_s, dg_tl, dg_tu, unlabeled_weight) if enable_dg else _zero()
    )
    if enable_dc:
        flags_s = src.has_common if src.has_common is not None else torch.zeros(0, dtype=torch.bool)
        flags_tl = tl.has_common if tl.has_common is not None else torch.zeros(0, dtype=torch.bool)
        l_dc_label = loss_domain_common_labeled(dc_s, flags_s, dc_tl, flags_tl)
        l_dc_un = loss_domain_common_unlabeled(dc_tu, unlabeled_weight)
    else:
        l_dc_label = _zero()
        l_dc_un = _zero()

    total = total_objective(l_gy, l_r, l_dg, l_dc_label, l_dc_un, weights)
    report = LossReport(
        l_gy=float(l_gy.detach()),
        l_r=float(l_r.detach()),
        l_dg=float(l_dg.detach()),
        l_dc_label=float(l_dc_label.detach()),
        l_dc_un=float(l_dc_un.detach()),
        total=float(total.detach()),
        n_source=src.n,
        n_target_labeled=tl.n,
        n_target_unlabeled=tu.n,
    )
    return total, report
