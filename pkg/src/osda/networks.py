"""Model components: conv feature extractor, classifier, the two domain
discriminators, the common-label recognizer, and the gradient-reversal
layer that turns the discriminator losses into an adversarial signal for
the extractor.

Everything runs in float64 on CPU so loss oracles and gradient checks hold
at tight tolerances and checkpoints are bit-reproducible.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"OSDACKP\x01"
CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    """Shape mismatch, bad configuration, or unreadable checkpoint."""


class GradientReversal(torch.autograd.Function):
    """Identity forward; backward multiplies the upstream gradient by -coeff."""

    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def gradient_reversal(x: torch.Tensor, coeff: float) -> torch.Tensor:
    if coeff < 0:
        raise NetworkError(f"reversal coefficient must be non-negative, got {coeff}")
    return GradientReversal.apply(x, float(coeff))


@dataclass(frozen=True)
class ModelConfig:
    canvas_size: int = 32
    channels: int = 1
    conv_channels: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 64
    hidden_dim: int = 64
    n_labels: int = 5

    def validate(self) -> None:
        if self.feature_dim <= 0 or self.hidden_dim <= 0 or self.n_labels <= 0:
            raise NetworkError("feature_dim, hidden_dim and n_labels must be positive")
        down = 2 ** len(self.conv_channels)
        if self.canvas_size % down != 0 or self.canvas_size // down < 1:
            raise NetworkError(
                f"canvas_size {self.canvas_size} incompatible with {len(self.conv_channels)} pooling stages"
            )


@dataclass
class ForwardTrace:
    """Per-batch forward results consumed by the losses and by Grad-CAM."""

    h: torch.Tensor              # (N, feature_dim)
    y_logit: torch.Tensor        # (N, n_labels), pre-sigmoid
    y_hat: torch.Tensor          # (N, n_labels), sigmoid probabilities
    dg_hat: torch.Tensor         # (N,)
    dc_hat: torch.Tensor         # (N,)
    r_hat: torch.Tensor          # (N,)
    conv_activations: torch.Tensor  # (N, C, H', W'), last conv map post-ReLU


class ConvFeatureExtractor(nn.Module):
    """Small conv net: blocks of [3x3 conv, ReLU, 2x2 max-pool], then an
    affine map to the feature vector. The last conv activation (pre-pool)
    is returned alongside the features for saliency maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        convs = []
        c_in = cfg.channels
        for c_out in cfg.conv_channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.pool = nn.MaxPool2d(2)
        side = cfg.canvas_size // (2 ** len(cfg.conv_channels))
        self.project = nn.Linear(c_in * side * side, cfg.feature_dim)

    def forward(self, x: torch.Tensor):
        act = None
        for i, conv in enumerate(self.convs):
            x = torch.relu(conv(x))
            if i == len(self.convs) - 1:
                act = x
            x = self.pool(x)
        h = self.project(x.reshape(x.shape[0], -1))
        return h, act


class MlpHead(nn.Module):
    """Two hidden affine+ReLU layers and a one-unit output (logit)."""

    def __init__(self, feature_dim: int, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, 1),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h).squeeze(-1)


class AdaptationModel(nn.Module):
    """Extractor + classifier + general/common domain discriminators + the
    common-label recognizer.

    Both discriminator heads read the features through the reversal layer;
    the recognizer reads them directly (optionally detached, so recognizer
    training cannot shape the extractor).
    """

    def __init__(self, cfg: ModelConfig, label_names=(), grl_coeff: float = 1.0,
                 detach_recognizer_features: bool = False):
        super().__init__()
        cfg.validate()
        if label_names and len(label_names) != cfg.n_labels:
            raise NetworkError("label_names length must equal n_labels")
        self.cfg = cfg
        self.label_names = tuple(label_names)
        self.grl_coeff = float(grl_coeff)
        self.detach_recognizer_features = detach_recognizer_features
        self.extractor = ConvFeatureExtractor(cfg)
        self.classifier = nn.Linear(cfg.feature_dim, cfg.n_labels)
        self.domain_disc = MlpHead(cfg.feature_dim, cfg.hidden_dim)
        self.common_disc = MlpHead(cfg.feature_dim, cfg.hidden_dim)
        self.recognizer = MlpHead(cfg.feature_dim, cfg.hidden_dim)
        self.double()

    def _check_input(self, x: torch.Tensor) -> None:
        expect = (self.cfg.channels, self.cfg.canvas_size, self.cfg.canvas_size)
        if tuple(x.shape[-3:]) != expect:
            raise NetworkError(f"input shape {tuple(x.shape)} does not end in {expect}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        h, _ = self.extractor(x)
        return h

    def classify(self, h: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.classifier(h))

    def discriminate_general(self, h: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.domain_disc(gradient_reversal(h, self.grl_coeff)))

    def discriminate_common(self, h: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.common_disc(gradient_reversal(h, self.grl_coeff)))

    def recognize(self, h: torch.Tensor) -> torch.Tensor:
        if self.detach_recognizer_features:
            h = h.detach()
        return torch.sigmoid(self.recognizer(h))

    def forward(self, x: torch.Tensor, grl_coeff: float | None = None) -> ForwardTrace:
        self._check_input(x)
        coeff = self.grl_coeff if grl_coeff is None else float(grl_coeff)
        h, act = self.extractor(x)
        y_logit = self.classifier(h)
        h_rev = gradient_reversal(h, coeff)
        h_rec = h.detach() if self.detach_recognizer_features else h
        return ForwardTrace(
            h=h,
            y_logit=y_logit,
            y_hat=torch.sigmoid(y_logit),
            dg_hat=torch.sigmoid(self.domain_disc(h_rev)),
            dc_hat=torch.sigmoid(self.common_disc(h_rev)),
            r_hat=torch.sigmoid(self.recognizer(h_rec)),
            conv_activations=act,
        )


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform weights, zero biases; deterministic in seed."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Linear):
            fan_in = module.in_features
        elif isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
        else:
            continue
        bound = 1.0 / float(np.sqrt(fan_in))
        with torch.no_grad():
            module.weight.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                module.bias.zero_()


# ---------------------------------------------------------------------------
# Checkpoint container: magic + u32 header length + JSON header, followed by
# raw little-endian float64 arrays in the order the header declares them.
# ---------------------------------------------------------------------------


def _model_header(model: AdaptationModel) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(model.cfg) | {"conv_channels": list(model.cfg.conv_channels)},
        "feature_dim": model.cfg.feature_dim,
        "hidden_dim": model.cfg.hidden_dim,
        "n_labels": model.cfg.n_labels,
        "label_names": list(model.label_names),
        "grl_coeff": model.grl_coeff,
        "detach_recognizer_features": model.detach_recognizer_features,
        "params": [
            {"name": name, "shape": list(p.shape)} for name, p in model.named_parameters()
        ],
    }


def save_checkpoint(path, model: AdaptationModel, extra_arrays: dict[str, np.ndarray] | None = None,
                    extra_meta: dict | None = None, topology=None) -> None:
    """Write the versioned binary checkpoint; atomic via rename."""
    extra_arrays = extra_arrays or {}
    header = _model_header(model)
    if topology is not None:
        header["topology"] = {
            "source_labels": list(topology.source_labels),
            "target_labels": list(topology.target_labels),
        }
    header["extra_meta"] = extra_meta or {}
    header["extra_arrays"] = [
        {"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in extra_arrays.items()
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in model.named_parameters():
            fh.write(p.detach().numpy().astype("<f8").tobytes())
        for name in extra_arrays:
            fh.write(np.ascontiguousarray(extra_arrays[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse a checkpoint file into (header, param arrays, extra arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise NetworkError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise NetworkError(
                f"{path}: unsupported checkpoint version {header.get('format_version')}"
            )
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise NetworkError(f"{path}: truncated parameter section at {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        extras = {}
        for entry in header.get("extra_arrays", []):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise NetworkError(f"{path}: truncated extra section at {entry['name']}")
            extras[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header, params, extras


def load_checkpoint(path) -> tuple[AdaptationModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; rejects shape mismatches."""
    header, params, extras = read_checkpoint(path)
    mc = dict(header["model"])
    mc["conv_channels"] = tuple(mc["conv_channels"])
    cfg = ModelConfig(**mc)
    model = AdaptationModel(
        cfg,
        label_names=tuple(header["label_names"]),
        grl_coeff=header["grl_coeff"],
        detach_recognizer_features=header["detach_recognizer_features"],
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in params:
                raise NetworkError(f"{path}: checkpoint missing parameter {name}")
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise NetworkError(
                    f"{path}: shape mismatch for {name}: file {arr.shape} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))
    return model, header, extras
