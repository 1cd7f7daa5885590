"""Command-line surface: synth, train, eval, pad, export-features, saliency.

Configuration is a JSON document; any field can be overridden on the
command line with ``--dotted.path=value`` flags (flags win over the file).
Relative output directories resolve under $OSDA_OUTPUT_ROOT when set.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
abort, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    write_manifest,
)
from .evaluation import EvaluationError, PadConfig
from .labels import LabelSpaceError, build_topology
from .networks import ModelConfig, NetworkError, load_checkpoint
from .objectives import LossWeights, ObjectiveError
from .trainer import NumericalAbort, TrainConfig, TrainerError, fit

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

OUTPUT_ROOT_ENV = "OSDA_OUTPUT_ROOT"

class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


_INVALID_ERRORS = (
    ConfigError,
    LabelSpaceError,
    DataError,
    ObjectiveError,
    TrainerError,
    NetworkError,
    EvaluationError,
)


@dataclass
class RunConfig:
    """Everything one run needs: data source, model, training, PAD, output."""

    out_dir: str = "run"
    data: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pad: PadConfig = field(default_factory=PadConfig)

    def validate(self) -> None:
        sources = [k for k in ("synthetic", "manifest") if k in self.data]
        if len(sources) != 1:
            raise ConfigError(
                "config must set exactly one data source: data.synthetic or data.manifest"
            )

    def resolved_out_dir(self) -> Path:
        out = Path(self.out_dir)
        if not out.is_absolute():
            out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
        return out


def _dataclass_from_dict(cls, payload: dict, name: str):
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw)
    unknown = set(raw) - {"out_dir", "data", "model", "train", "pad"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    train_raw = dict(raw.get("train", {}))
    weights = _dataclass_from_dict(LossWeights, train_raw.pop("weights", {}), "train.weights")
    if "group_sizes" in train_raw:
        train_raw["group_sizes"] = tuple(train_raw["group_sizes"])
    train = _dataclass_from_dict(TrainConfig, {**train_raw, "weights": weights}, "train")
    model_raw = dict(raw.get("model", {}))
    if "conv_channels" in model_raw:
        model_raw["conv_channels"] = tuple(model_raw["conv_channels"])
    model = _dataclass_from_dict(ModelConfig, model_raw, "model")
    pad_raw = dict(raw.get("pad", {}))
    if "c_grid" in pad_raw:
        pad_raw["c_grid"] = tuple(pad_raw["c_grid"])
    pad = _dataclass_from_dict(PadConfig, pad_raw, "pad")
    cfg = RunConfig(out_dir=raw.get("out_dir", "run"), data=raw.get("data", {}),
                    model=model, train=train, pad=pad)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {
        "out_dir": cfg.out_dir,
        "data": copy.deepcopy(cfg.data),
        "model": asdict(cfg.model) | {"conv_channels": list(cfg.model.conv_channels)},
        "train": asdict(cfg.train) | {"group_sizes": list(cfg.train.group_sizes)},
        "pad": asdict(cfg.pad) | {"c_grid": list(cfg.pad.c_grid)},
    }
    return out


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply --dotted.path=value flags onto the raw config dict."""
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; expected --dotted.path=value")
        dotted, text = item[2:].split("=", 1)
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a section")
        node[parts[-1]] = _parse_override_value(text)
    return raw


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    cfg = config_from_dict(raw)
    return cfg


def _load_datasets(cfg: RunConfig):
    cfg.validate()
    if "synthetic" in cfg.data:
        spec = _dataclass_from_dict(SyntheticSpec, dict(cfg.data["synthetic"]), "data.synthetic")
        return generate_synthetic(spec)
    m = dict(cfg.data["manifest"])
    for key in ("path", "source_labels", "target_labels"):
        if key not in m:
            raise ConfigError(f"data.manifest requires {key}")
    topology = build_topology(m["source_labels"], m["target_labels"])
    return load_manifest(m["path"], topology, canvas_size=m.get("canvas_size", 32),
                         channels=m.get("channels", 1))


def _topology_for_checkpoint(header: dict, manifest_cfg: dict | None):
    if header.get("topology"):
        t = header["topology"]
        return build_topology(t["source_labels"], t["target_labels"])
    if manifest_cfg and "source_labels" in manifest_cfg:
        return build_topology(manifest_cfg["source_labels"], manifest_cfg["target_labels"])
    raise ConfigError("checkpoint carries no topology; pass label lists via config")


def _manifest_samples(path, topology, model_cfg: ModelConfig):
    source, tl, tu, _ = load_manifest(path, topology, canvas_size=model_cfg.canvas_size,
                                      channels=model_cfg.channels)
    return source, tl, tu


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides)
    cfg.validate()
    if "synthetic" not in cfg.data:
        raise ConfigError("synth requires data.synthetic")
    spec = _dataclass_from_dict(SyntheticSpec, dict(cfg.data["synthetic"]), "data.synthetic")
    datasets = generate_synthetic(spec)
    out = cfg.resolved_out_dir()
    manifest = write_manifest(out, datasets[:3], datasets[3])
    n = sum(len(g) for g in datasets[:3])
    print(f"synth: wrote {n} samples to {manifest}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides)
    source, tl, tu, topology = _load_datasets(cfg)
    out = cfg.resolved_out_dir()
    model_cfg = replace(cfg.model, n_labels=topology.n_labels)
    train_cfg = replace(cfg.train, checkpoint_dir=str(out))
    result = fit((source, tl, tu), topology, train_cfg, model_cfg, resume=args.resume)
    last = result.records[-1]
    best = result.best_score if result.best_score > -np.inf else None
    print(
        f"train: {train_cfg.steps} steps done; final total={last.losses.total:.4f}; "
        f"best mean target AUC={best if best is None else round(best, 4)}; "
        f"checkpoints in {out}"
    )
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides) if args.config else RunConfig()
    model, header, _ = load_checkpoint(args.checkpoint)
    topology = _topology_for_checkpoint(header, cfg.data.get("manifest"))
    _, tl, tu = _manifest_samples(args.manifest, topology, model.cfg)
    report = evaluation.evaluate(model, tuple(tl) + tuple(tu), topology)
    payload = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n")
    print(payload)
    return EXIT_OK


def cmd_pad(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides) if args.config else RunConfig()
    if args.features:
        feats, domains, _, _ = evaluation.read_feature_file(args.features)
        fs = feats[np.asarray(domains) == "source"]
        ft = feats[np.asarray(domains) == "target"]
    else:
        if not (args.checkpoint and args.manifest):
            raise ConfigError("pad needs either --features or --checkpoint with --manifest")
        model, header, _ = load_checkpoint(args.checkpoint)
        topology = _topology_for_checkpoint(header, cfg.data.get("manifest"))
        source, tl, tu = _manifest_samples(args.manifest, topology, model.cfg)
        fs = evaluation.extract_features(model, source)
        ft = evaluation.extract_features(model, tuple(tl) + tuple(tu))
    report = evaluation.pad_report(fs, ft, cfg.pad)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_export_features(args, overrides) -> int:
    cfg = load_run_config(args.config, overrides) if args.config else RunConfig()
    model, header, _ = load_checkpoint(args.checkpoint)
    topology = _topology_for_checkpoint(header, cfg.data.get("manifest"))
    source, tl, tu = _manifest_samples(args.manifest, topology, model.cfg)
    samples = tuple(source) + tuple(tl) + tuple(tu)
    path = evaluation.export_features(model, samples, args.out, topology)
    print(f"export-features: wrote {len(samples)} rows to {path}")
    return EXIT_OK


def cmd_saliency(args, overrides) -> int:
    model, header, _ = load_checkpoint(args.checkpoint)
    from .data import _load_image  # same loader the manifest path uses

    img_path = Path(args.image)
    if not img_path.exists():
        raise ConfigError(f"image not found: {img_path}")
    image = _load_image(img_path, model.cfg.canvas_size, model.cfg.channels)
    smap = evaluation.grad_cam(model, image, args.label)
    out = Path(args.out) if args.out else img_path.with_name(img_path.stem + f"_cam_{args.label}.png")
    evaluation.write_saliency(smap, image, out, image_path=str(img_path))
    print(f"saliency: wrote {out} (map shape {smap.grid.shape})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osda",
        description="Semi-supervised open-set domain-adversarial training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_args):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        for flag, kwargs in extra_args.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth)
    p_train = add("train", cmd_train)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the last checkpoint in out_dir")
    add("eval", cmd_eval,
        **{"--checkpoint": dict(required=True), "--manifest": dict(required=True),
           "--out": dict(default=None)})
    add("pad", cmd_pad,
        **{"--checkpoint": dict(default=None), "--manifest": dict(default=None),
           "--features": dict(default=None, help="feature CSV with both domains")})
    add("export-features", cmd_export_features,
        **{"--checkpoint": dict(required=True), "--manifest": dict(required=True),
           "--out": dict(required=True)})
    add("saliency", cmd_saliency,
        **{"--checkpoint": dict(required=True), "--image": dict(required=True),
           "--label": dict(required=True), "--out": dict(default=None)})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.fn(args, extra)
    except _INVALID_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
