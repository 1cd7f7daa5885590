"""Adversarial training loop: batch assembly, one simultaneous update per
step (discriminators descend their cross-entropy, the extractor receives
the reversed gradient), checkpointing with exact resume, and a JSONL
metrics log.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .data import Batch, Datasets, sample_batch
from .labels import LabelTopology
from .networks import AdaptationModel, ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .objectives import LossReport, LossWeights, compute_losses


class TrainerError(ValueError):
    """Invalid training configuration."""


class NumericalAbort(RuntimeError):
    """A loss term or gradient became non-finite; the run stops and the
    previous checkpoint stays intact."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    group_sizes: tuple[int, int, int] = (8, 4, 8)
    grl: str | float = "ramp"  # "ramp" or a constant coefficient
    seed: int = 0
    eval_every: int = 250
    val_fraction: float = 0.25
    checkpoint_dir: str | None = None
    enable_dg: bool = True
    enable_dc: bool = True
    enable_r: bool = True
    detach_recognizer_features: bool = False
    with_replacement: bool = True
    eval_pad: bool = False

    def validate(self) -> None:
        if self.steps < 1:
            raise TrainerError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")
        if self.eval_every < 1:
            raise TrainerError("eval_every must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise TrainerError("val_fraction must lie in [0, 1)")
        if not isinstance(self.grl, (int, float)) and self.grl != "ramp":
            raise TrainerError(f"grl must be 'ramp' or a constant, got {self.grl!r}")
        self.weights.validate()


@dataclass
class TrainRecord:
    step: int
    losses: LossReport
    auc_by_label: dict | None = None
    pad: float | None = None
    seconds: float = 0.0

    def to_json(self) -> str:
        payload = {"step": self.step, **self.losses.terms()}
        if self.auc_by_label is not None:
            payload["auc_by_label"] = self.auc_by_label
        if self.pad is not None:
            payload["pad"] = self.pad
        payload["seconds"] = self.seconds
        return json.dumps(payload, sort_keys=True)


class Adam:
    """Plain adaptive-moment optimizer over the model's parameter list.

    Hand-rolled so the moment buffers serialize into the checkpoint
    container as float64 arrays and round-trip bit-exactly.
    """

    def __init__(self, named_params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.names, self.params = zip(*named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / bias1) / ((v / bias2).sqrt() + self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"adam.m.{name}"] = m.numpy()
            out[f"adam.v.{name}"] = v.numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name, m, v in zip(self.names, self.m, self.v):
            m.copy_(torch.from_numpy(arrays[f"adam.m.{name}"]))
            v.copy_(torch.from_numpy(arrays[f"adam.v.{name}"]))


def grl_coefficient(cfg: TrainConfig, step: int) -> float:
    """Reversal strength for a 0-based step index.

    The ramp 2 / (1 + exp(-10 p)) - 1 over progress p stabilizes the early
    adversarial phase; a numeric config value pins it constant.
    """
    if isinstance(cfg.grl, (int, float)):
        return float(cfg.grl)
    p = step / cfg.steps
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def train_step(model: AdaptationModel, batch: Batch, optimizer: Adam, cfg: TrainConfig,
               topology: LabelTopology) -> LossReport:
    """Forward all groups, compute the combined objective, apply one update."""
    optimizer.zero_grad()
    total, report = compute_losses(
        model, batch, topology, cfg.weights,
        enable_dg=cfg.enable_dg, enable_dc=cfg.enable_dc, enable_r=cfg.enable_r,
    )
    for name, value in report.terms().items():
        if not math.isfinite(value):
            raise NumericalAbort(f"loss term {name} is non-finite ({value})")
    total.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalAbort(f"gradient of {name} is non-finite")
    optimizer.step()
    return report


@dataclass
class FitResult:
    model: AdaptationModel
    best_model: AdaptationModel
    records: list[TrainRecord]
    best_score: float
    topology: LabelTopology


def _val_split(target_labeled, cfg: TrainConfig):
    # split derived from its own seeded stream so resume reproduces it
    n = len(target_labeled)
    n_val = int(round(cfg.val_fraction * n))
    order = np.random.default_rng(cfg.seed + 7919).permutation(n)
    val = tuple(target_labeled[i] for i in order[:n_val])
    train = tuple(target_labeled[i] for i in order[n_val:])
    if not train:
        raise TrainerError("val_fraction leaves no labeled target samples for training")
    return train, val


def _mean_defined(auc_by_label: dict) -> float | None:
    vals = [v for v in auc_by_label.values() if v is not None]
    return float(np.mean(vals)) if vals else None


def _clone_model(model: AdaptationModel) -> AdaptationModel:
    twin = AdaptationModel(
        model.cfg, label_names=model.label_names, grl_coeff=model.grl_coeff,
        detach_recognizer_features=model.detach_recognizer_features,
    )
    twin.load_state_dict(model.state_dict())
    return twin


def fit(datasets: Datasets, topology: LabelTopology, cfg: TrainConfig,
        model_cfg: ModelConfig | None = None, resume: bool = False) -> FitResult:
    """Run the full training loop.

    Evaluates every ``eval_every`` steps on the held-out labeled-target
    split plus the unlabeled samples' hidden ground truth, tracks the
    model with the best mean target AUC, checkpoints (model, optimizer,
    batch rng) for exact resume, and appends one JSON record per step to
    ``metrics.jsonl`` when a checkpoint directory is configured.
    """
    cfg.validate()
    source, target_labeled, target_unlabeled = datasets
    if model_cfg is None:
        model_cfg = ModelConfig(n_labels=topology.n_labels)
    if model_cfg.n_labels != topology.n_labels:
        raise TrainerError("model n_labels must match the topology")

    tl_train, tl_val = _val_split(target_labeled, cfg)
    train_datasets = (source, tl_train, target_unlabeled)
    eval_samples = tuple(tl_val) + tuple(s for s in target_unlabeled if s.hidden_labels is not None)

    model = AdaptationModel(
        model_cfg, label_names=topology.unified,
        detach_recognizer_features=cfg.detach_recognizer_features,
    )
    init_parameters(model, cfg.seed)
    optimizer = Adam(list(model.named_parameters()), cfg.learning_rate,
                     cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    best = {"score": -math.inf, "state": None}
    start_step = 0

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    log_fh = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        last_path = ckpt_dir / "last.ckpt"
        if resume and last_path.exists():
            start_step, best = _restore(last_path, model, optimizer, rng, best)
        log_fh = open(ckpt_dir / "metrics.jsonl", "a")

    records: list[TrainRecord] = []
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            t0 = time.perf_counter()
            model.grl_coeff = grl_coefficient(cfg, step - 1)
            batch = sample_batch(train_datasets, cfg.group_sizes, rng,
                                 with_replacement=cfg.with_replacement)
            report = train_step(model, batch, optimizer, cfg, topology)
            record = TrainRecord(step=step, losses=report)

            if step % cfg.eval_every == 0 or step == cfg.steps:
                if eval_samples:
                    record.auc_by_label = evaluation.per_label_auc(model, eval_samples, topology)
                    score = _mean_defined(record.auc_by_label)
                    if score is not None and score > best["score"]:
                        best = {"score": score, "state": {
                            k: v.detach().clone() for k, v in model.state_dict().items()
                        }}
                if cfg.eval_pad:
                    record.pad = _training_pad(model, source, target_labeled, target_unlabeled)
                if ckpt_dir is not None:
                    _save_train_checkpoint(ckpt_dir / "last.ckpt", model, optimizer, rng,
                                           step, best, topology)
            record.seconds = time.perf_counter() - t0
            records.append(record)
            if log_fh is not None:
                log_fh.write(record.to_json() + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    best_model = _clone_model(model)
    if best["state"] is not None:
        best_model.load_state_dict(best["state"])
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ckpt", model, topology=topology)
        save_checkpoint(ckpt_dir / "best.ckpt", best_model, topology=topology)
    return FitResult(model=model, best_model=best_model, records=records,
                     best_score=best["score"], topology=topology)


def _training_pad(model, source, target_labeled, target_unlabeled,
                  max_per_domain: int = 200) -> float:
    src = source[:max_per_domain]
    tgt = (tuple(target_labeled) + tuple(target_unlabeled))[:max_per_domain]
    fs = evaluation.extract_features(model, src)
    ft = evaluation.extract_features(model, tgt)
    return evaluation.proxy_a_distance(fs, ft, evaluation.PadConfig())


def _save_train_checkpoint(path, model, optimizer: Adam, rng, step: int, best, topology=None) -> None:
    extra = optimizer.state_arrays()
    meta = {
        "step": step,
        "adam_t": optimizer.t,
        "rng_state": rng.bit_generator.state,
        "best_score": best["score"] if math.isfinite(best["score"]) else None,
    }
    if best["state"] is not None:
        for k, v in best["state"].items():
            extra[f"best.{k}"] = v.numpy()
    save_checkpoint(path, model, extra_arrays=extra, extra_meta=meta, topology=topology)


def _restore(path, model, optimizer: Adam, rng, best):
    loaded, header, extras = load_checkpoint(path)
    model.load_state_dict(loaded.state_dict())
    meta = header["extra_meta"]
    optimizer.load_state_arrays(extras, meta["adam_t"])
    rng.bit_generator.state = meta["rng_state"]
    best_state = {
        k[len("best."):]: torch.from_numpy(v)
        for k, v in extras.items() if k.startswith("best.")
    }
    score = meta["best_score"] if meta["best_score"] is not None else -math.inf
    best = {"score": score, "state": best_state or None}
    return meta["step"], best
