"""Run configuration, checkpoints and the diffusion training driver."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import yaml

from ._exceptions import ConfigurationError, ContractError, TrainingDivergedError
from .codec import VQCodec
from .conditioning import MODES
from .ldm import LatentDiffusion
from .metrics import FeatureExtractor, MaskSegmenter

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "train_diffusion",
    "compare_checkpoints",
    "ComparisonTable",
    "load_config",
]

CHECKPOINT_FORMAT = "mcldm-checkpoint"
CHECKPOINT_VERSION = 1

_ESTIMATORS = {cls.__name__: cls for cls in (VQCodec, LatentDiffusion, FeatureExtractor, MaskSegmenter)}


@dataclass
class TrainConfig:
    """Everything that determines a diffusion run.

    ``sample_steps`` is what the shipped configuration uses for generation;
    the desk experiments override it with a smaller number.
    """

    name: str = "run"
    mode: str = "uncond"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    p2_k: float = 1.0
    p2_gamma: float = 0.5
    schedule: str = "linear"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    base_channels: int = 32
    heads: int = 4
    head_dim: int = 16
    sample_steps: int = 500
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "timesteps", "base_channels", "heads", "head_dim",
                     "sample_steps", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not self.p2_k > 0 or self.p2_gamma < 0:
            raise ConfigurationError("p2_k must be positive and p2_gamma non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def estimator_params(self) -> dict:
        return dict(mode=self.mode, schedule=self.schedule, timesteps=self.timesteps,
                    beta_start=self.beta_start, beta_end=self.beta_end, p2_k=self.p2_k,
                    p2_gamma=self.p2_gamma, epochs=self.epochs, batch_size=self.batch_size,
                    lr=self.lr, base_channels=self.base_channels, heads=self.heads,
                    head_dim=self.head_dim, sample_steps=self.sample_steps,
                    random_state=self.seed)


def load_config(path) -> dict:
    """Read a YAML run configuration (see ``configs/`` for the documented keys)."""
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return cfg


@dataclass
class Checkpoint:
    """Versioned container: estimator class, parameters and fitted state.

    A diffusion checkpoint embeds its codec as a nested checkpoint.
    """

    kind: str
    params: dict
    state: dict
    config: Optional[dict] = None
    codec: Optional["Checkpoint"] = None
    version: int = CHECKPOINT_VERSION

    @property
    def epoch(self) -> Optional[int]:
        return self.state.get("epoch")

    @classmethod
    def from_estimator(cls, est, config: Optional[dict] = None) -> "Checkpoint":
        params = est.get_params(deep=False)
        codec = params.pop("codec", None)
        return cls(type(est).__name__, _plain(params), est._get_state(), config,
                   cls.from_estimator(codec) if codec is not None else None)

    def to_estimator(self):
        if self.kind not in _ESTIMATORS:
            raise ContractError(f"unknown checkpoint kind {self.kind!r}")
        params = dict(self.params)
        if self.codec is not None:
            params["codec"] = self.codec.to_estimator()
        est = _ESTIMATORS[self.kind](**params)
        est._set_state(self.state)
        return est

    def to_dict(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "version": self.version, "kind": self.kind,
                "params": self.params, "state": self.state, "config": self.config,
                "codec": None if self.codec is None else self.codec.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ContractError("not an mcldm checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {d.get('version')!r}")
        codec = None if d.get("codec") is None else cls.from_dict(d["codec"])
        return cls(d["kind"], d["params"], d["state"], d.get("config"), codec, d["version"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_dict(), path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(torch.load(path, weights_only=True))


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


def save_checkpoint(est, path, config: Optional[dict] = None) -> Path:
    return Checkpoint.from_estimator(est, config).save(path)


def load_checkpoint(path):
    """Load a checkpoint file back into a fitted estimator."""
    return Checkpoint.load(path).to_estimator()


def train_diffusion(cfg: TrainConfig, dataset, codec, run_dir=None,
                    resume: Optional[Checkpoint] = None, verbose: bool = False) -> Checkpoint:
    """Train a diffusion model on ``dataset`` and return the final checkpoint.

    ``codec`` is a fitted :class:`VQCodec` or a codec :class:`Checkpoint`.
    With ``run_dir`` every ``cfg.checkpoint_every`` epochs a checkpoint is
    written to ``run_dir/epoch_{k}.ckpt`` and the loss curve to
    ``run_dir/loss.csv``. A non-finite loss writes ``run_dir/diverged.ckpt``
    and raises :class:`TrainingDivergedError`.
    """
    if isinstance(codec, Checkpoint):
        codec = codec.to_estimator()
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    run_dir = None if run_dir is None else Path(run_dir)
    config = asdict(cfg)
    if resume is not None:
        est = resume.to_estimator()
        est.set_params(codec=codec, epochs=cfg.epochs, warm_start=True, verbose=verbose)
    else:
        est = LatentDiffusion(codec=codec, verbose=verbose, **cfg.estimator_params())

    def on_epoch(model):
        if run_dir is None:
            return
        _write_loss_csv(run_dir / "loss.csv", model.loss_history_)
        if model.epoch_ % cfg.checkpoint_every == 0 or model.epoch_ == cfg.epochs:
            save_checkpoint(model, run_dir / f"epoch_{model.epoch_}.ckpt", config)

    try:
        est.fit(dataset.images, dataset.attrs, dataset.masks, epoch_callback=on_epoch)
    except TrainingDivergedError as exc:
        path = None
        if run_dir is not None:
            path = save_checkpoint(est, run_dir / "diverged.ckpt", config)
        raise TrainingDivergedError(str(exc), checkpoint_path=path) from exc
    return Checkpoint.from_estimator(est, config)


def _write_loss_csv(path: Path, history):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, start=1):
            w.writerow([i, repr(float(v))])


@dataclass
class ComparisonTable:
    """Metric values per run (columns) and epoch (rows); missing cells are NaN."""

    epochs: list
    runs: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return (len(self.epochs), len(self.runs))

    def value(self, run: str, epoch: int) -> float:
        return self.runs[run][self.epochs.index(epoch)]

    def to_csv(self, path=None) -> str:
        names = list(self.runs)
        lines = [",".join(["epoch"] + names)]
        for i, ep in enumerate(self.epochs):
            lines.append(",".join([str(ep)] + [repr(float(self.runs[n][i])) for n in names]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def compare_checkpoints(runs: Mapping[str, Sequence], metric: Callable) -> ComparisonTable:
    """Evaluate ``metric(estimator)`` for every checkpoint of every run.

    ``runs`` maps a run name to checkpoints (paths, :class:`Checkpoint`
    objects or fitted estimators). All models must share latent geometry.
    """
    if not runs:
        raise ContractError("no runs given")
    values: dict[str, dict[int, float]] = {}
    geometry = None
    for name, ckpts in runs.items():
        values[name] = {}
        for ck in ckpts:
            if isinstance(ck, (str, Path)):
                ck = Checkpoint.load(ck)
            est = ck.to_estimator() if isinstance(ck, Checkpoint) else ck
            geo = (tuple(est.latent_shape_), est.image_size_)
            if geometry is None:
                geometry = geo
            elif geo != geometry:
                raise ContractError(f"run {name!r} has geometry {geo}, expected {geometry}")
            values[name][int(est.epoch_)] = float(metric(est))
    epochs = sorted({e for v in values.values() for e in v})
    return ComparisonTable(epochs, {n: [v.get(e, math.nan) for e in epochs] for n, v in values.items()})
