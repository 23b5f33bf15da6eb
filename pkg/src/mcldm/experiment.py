"""Desk-scale end-to-end experiment: every conditioning mode over several seeds.

The codec and the two evaluation networks are trained once and shared by all
diffusion runs; the seed varies diffusion initialization, data order, noise
and sampling. Each uncond run is paired with a gamma=0 baseline of identical
architecture and data order for the P2 comparison.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional


from .codec import VQCodec
from .conditioning import MODES
from .data import generate_dataset
from .metrics import FeatureExtractor, MaskSegmenter, evaluate, frechet_distance
from .training import TrainConfig, compare_checkpoints, save_checkpoint, train_diffusion

__all__ = ["DeskConfig", "DeskResults", "run_desk", "directional_checks"]


@dataclass
class DeskConfig:
    n_images: int = 3000
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    modes: tuple = MODES
    codec_epochs: int = 15
    extractor_epochs: int = 6
    segmenter_epochs: int = 5
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    checkpoint_every: int = 10
    eval_n: int = 200
    eval_steps: int = 50
    lpips_conditions: int = 10
    lpips_samples: int = 10
    baseline: bool = True

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "DeskConfig":
        d = dict(d)
        for key in ("seeds", "modes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DeskResults:
    config: dict
    digest: str
    codec_psnr: float
    reports: dict = field(default_factory=dict)  # "mode/seed" -> EvalReport dict
    losses: dict = field(default_factory=dict)  # "mode/seed" -> per-epoch losses
    p2_fid: dict = field(default_factory=dict)  # "p2|baseline/seed" -> {epoch: fid}
    seconds: float = 0.0

    def report(self, mode: str, seed: int) -> dict:
        return self.reports[f"{mode}/{seed}"]

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "DeskResults":
        return cls(**json.loads(Path(path).read_text()))


def _log(verbose, *msg):
    if verbose:
        print(*msg, flush=True)


def run_desk(cfg: DeskConfig, out_dir, verbose: bool = False) -> DeskResults:
    """Train and evaluate every mode for every seed; write ``results.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.process_time()
    ds = generate_dataset(cfg.n_images, seed=cfg.data_seed)
    train, val = ds.split()

    codec = VQCodec(epochs=cfg.codec_epochs, random_state=cfg.data_seed).fit(train.images)
    save_checkpoint(codec, out / "codec.ckpt")
    extractor = FeatureExtractor(epochs=cfg.extractor_epochs).fit(train.images, train.attrs)
    save_checkpoint(extractor, out / "extractor.ckpt")
    segmenter = MaskSegmenter(epochs=cfg.segmenter_epochs).fit(train.images, train.masks)
    save_checkpoint(segmenter, out / "segmenter.ckpt")
    psnr = codec.score(val.images)
    _log(verbose, f"codec psnr={psnr:.2f} dB")
    results = DeskResults(asdict(cfg), cfg.digest(), float(psnr))

    def fid_of(model):
        n = min(cfg.eval_n, len(val))
        gen = model.sample(n=n, steps=cfg.eval_steps, eta=0.0, seed=int(model.random_state))
        return frechet_distance(extractor.transform(val.images[:n]), extractor.transform(gen))

    for seed in cfg.seeds:
        for mode in cfg.modes:
            tc = TrainConfig(name=f"{mode}_s{seed}", mode=mode, epochs=cfg.epochs,
                             batch_size=cfg.batch_size, lr=cfg.lr, sample_steps=cfg.eval_steps,
                             checkpoint_every=cfg.checkpoint_every, seed=seed)
            ck = train_diffusion(tc, train, codec, out / tc.name, verbose=verbose)
            model = ck.to_estimator()
            rep = evaluate(model, val, extractor, segmenter, n=cfg.eval_n, steps=cfg.eval_steps,
                           seed=seed, n_lpips_conditions=cfg.lpips_conditions,
                           n_lpips_samples=cfg.lpips_samples)
            key = f"{mode}/{seed}"
            results.reports[key] = asdict(rep)
            results.losses[key] = [float(v) for v in model.loss_history_]
            _log(verbose, key, rep)
            if mode == "uncond" and cfg.baseline:
                base_cfg = TrainConfig(**{**asdict(tc), "name": f"baseline_s{seed}", "p2_gamma": 0.0})
                train_diffusion(base_cfg, train, codec, out / base_cfg.name)
                table = compare_checkpoints(
                    {"p2": sorted((out / tc.name).glob("epoch_*.ckpt")),
                     "baseline": sorted((out / base_cfg.name).glob("epoch_*.ckpt"))}, fid_of)
                table.to_csv(out / f"p2_vs_baseline_s{seed}.csv")
                for run, vals in table.runs.items():
                    results.p2_fid[f"{run}/{seed}"] = {str(e): v for e, v in zip(table.epochs, vals)}
                _log(verbose, f"p2 vs baseline seed {seed}:\n" + table.to_csv())
    results.seconds = time.process_time() - start
    results.to_json(out / "results.json")
    return results


def load_cached(out_dir, cfg: DeskConfig) -> Optional[DeskResults]:
    """Previously written results for exactly this configuration, if any."""
    path = Path(out_dir) / "results.json"
    if not path.exists():
        return None
    res = DeskResults.from_json(path)
    return res if res.digest == cfg.digest() else None


def directional_checks(res: DeskResults) -> dict:
    """Per-seed outcome of each directional check plus the majority verdicts."""
    cfg = DeskConfig.from_dict(res.config)
    seeds = list(cfg.seeds)
    out = {"loss_halved": {}, "attr_above_chance": {}, "miou_nopool_ge_pooled": {},
           "diversity_order": {}, "p2_fid_le_baseline": {}}
    for s in seeds:
        out["loss_halved"][s] = all(
            res.losses[f"{m}/{s}"][-1] <= 0.5 * res.losses[f"{m}/{s}"][0] for m in cfg.modes)
        if "attr" in cfg.modes:
            out["attr_above_chance"][s] = res.report("attr", s)["attr_acc"] >= 0.75
        if {"mask_pooled", "mask_nopool"} <= set(cfg.modes):
            out["miou_nopool_ge_pooled"][s] = (res.report("mask_nopool", s)["miou"]
                                               >= res.report("mask_pooled", s)["miou"])
        if {"mask_pooled", "mask_nopool", "multi"} <= set(cfg.modes):
            d = {m: res.report(m, s)["lpips_mean"] for m in ("mask_pooled", "mask_nopool", "multi")}
            out["diversity_order"][s] = d["mask_pooled"] > d["mask_nopool"] >= d["multi"]
        if f"p2/{s}" in res.p2_fid:
            last = max(res.p2_fid[f"p2/{s}"], key=int)
            out["p2_fid_le_baseline"][s] = res.p2_fid[f"p2/{s}"][last] <= res.p2_fid[f"baseline/{s}"][last]
    return out


def majority(per_seed: dict) -> bool:
    return bool(per_seed) and sum(per_seed.values()) * 3 >= 2 * len(per_seed)

