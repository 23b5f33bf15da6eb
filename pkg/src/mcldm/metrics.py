"""Evaluation: feature distances, condition fidelity and sample diversity.

The Inception, face-parsing and LPIPS networks of a full-scale evaluation
are replaced by two small convnets trained on the synthetic data: an
attribute classifier whose penultimate layer provides features, and a
segmenter. Absolute values are therefore only comparable within this
package.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from itertools import combinations
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn

from ._exceptions import ContractError
from ._validation import batches, check_attributes, check_images, check_is_fitted, check_masks

__all__ = [
    "frechet_distance",
    "kernel_distance",
    "kernel_distance_subsets",
    "miou",
    "mask_accuracy",
    "attribute_accuracy",
    "FeatureExtractor",
    "MaskSegmenter",
    "pairwise_diversity",
    "diversity_lpips",
    "EvalReport",
    "evaluate",
]


def _check_feats(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"feature matrices must share width, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ContractError("need at least 2 rows per feature set")
    return a, b


def _sqrtm_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a, feats_b, eps: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` of two feature sets.

    Covariances get ``eps * I`` added; the cross term is computed as
    ``Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))``, which is symmetric and has the
    same trace.
    """
    a, b = _check_feats(feats_a, feats_b)
    w = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eps * np.eye(w)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eps * np.eye(w)
    root_a = _sqrtm_psd(cov_a)
    cross = np.trace(_sqrtm_psd(root_a @ cov_b @ root_a))
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(value, 0.0)


def _poly_kernel(x, y, width):
    return (x @ y.T / width + 1.0) ** 3


def kernel_distance(feats_a, feats_b) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel ``(x.y / w + 1)^3``."""
    a, b = _check_feats(feats_a, feats_b)
    w = a.shape[1]
    m, n = len(a), len(b)
    kaa = _poly_kernel(a, a, w)
    kbb = _poly_kernel(b, b, w)
    kab = _poly_kernel(a, b, w)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def kernel_distance_subsets(feats_a, feats_b, n_subsets: int = 50, subset_size: int = 100,
                            seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation of the estimator over random subsets."""
    a, b = _check_feats(feats_a, feats_b)
    size = min(subset_size, len(a), len(b))
    rng = np.random.default_rng(seed)
    vals = [kernel_distance(a[rng.choice(len(a), size, replace=False)],
                            b[rng.choice(len(b), size, replace=False)]) for _ in range(n_subsets)]
    return float(np.mean(vals)), float(np.std(vals))


def miou(pred, gt) -> float:
    """Mean intersection-over-union over mask channels, pooled over all pixels.

    Accepts ``(M, H, W)`` or ``(N, M, H, W)`` stacks. Classes empty in both
    masks are skipped; if every class is skipped the masks agree and 1.0 is
    returned.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or pred.ndim not in (3, 4):
        raise ContractError(f"mask geometry mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 4:
        pred = pred.transpose(1, 0, 2, 3)
        gt = gt.transpose(1, 0, 2, 3)
    flat_p = pred.reshape(pred.shape[0], -1)
    flat_g = gt.reshape(gt.shape[0], -1)
    inter = (flat_p & flat_g).sum(axis=1)
    union = (flat_p | flat_g).sum(axis=1)
    keep = union > 0
    if not keep.any():
        return 1.0
    return float(np.mean(inter[keep] / union[keep]))


def _labels(mask):
    mask = np.asarray(mask)
    idx = np.argmax(mask, axis=-3) + 1
    return np.where(mask.sum(axis=-3) > 0, idx, 0)


def mask_accuracy(pred, gt) -> float:
    """Pixel accuracy of the label maps (background included), pooled over the batch."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"mask geometry mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(_labels(pred) == _labels(gt)))


class _ConvStack(nn.Module):
    def __init__(self, n_out, widths=(32, 64, 64, 128)):
        super().__init__()
        layers = []
        prev = 3
        for i, w in enumerate(widths):
            layers.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1),
                nn.GroupNorm(8, w), nn.SiLU(),
                nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(8, w), nn.SiLU()))
            prev = w
        self.stages = nn.ModuleList(layers)
        self.fc = nn.Linear(prev, n_out)

    def taps(self, x):
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def forward(self, x):
        feats = self.taps(x)[-1].mean(dim=(2, 3))
        return self.fc(feats), feats


def _augment(x, gen):
    """Noise and light blur so the eval nets tolerate decoder artifacts."""
    b = x.shape[0]
    blur = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    mix = torch.rand(b, 1, 1, 1, generator=gen)
    x = mix * blur + (1 - mix) * x
    sigma = 0.08 * torch.rand(b, 1, 1, 1, generator=gen)
    return x + sigma * torch.randn(x.shape, generator=gen)


class FeatureExtractor(BaseEstimator, ClassifierMixin):
    """Multi-label attribute classifier doubling as the feature network.

    ``transform`` returns the pooled penultimate features used for the
    Frechet and kernel distances; :meth:`perceptual_distance` compares
    channel-normalized activations of every stage.
    """

    def __init__(self, epochs=8, batch_size=64, lr=1e-3, threshold=0.5, random_state=0,
                 verbose=False):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.threshold = threshold
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y):
        X = torch.from_numpy(check_images(X))
        y = torch.from_numpy(check_attributes(y))
        if len(X) != len(y):
            raise ContractError("images and attributes differ in length")
        torch.manual_seed(self.random_state)
        self.n_attributes_ = y.shape[1]
        self.module_ = net = _ConvStack(self.n_attributes_)
        gen = torch.Generator().manual_seed(self.random_state)
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        net.train()
        for epoch in range(self.epochs):
            perm = torch.randperm(len(X), generator=gen)
            total = 0.0
            for sl in batches(len(X), self.batch_size):
                idx = perm[sl]
                logits, _ = net(_augment(X[idx], gen))
                loss = F.binary_cross_entropy_with_logits(logits, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            if self.verbose:
                print(f"extractor epoch {epoch + 1}: bce={total / len(X):.4f}", flush=True)
        net.eval()
        return self

    def _forward(self, X):
        check_is_fitted(self)
        X = check_images(X)
        logits, feats = [], []
        with torch.no_grad():
            for sl in batches(len(X), 256):
                lg, ft = self.module_(torch.from_numpy(X[sl]))
                logits.append(lg)
                feats.append(ft)
        return torch.cat(logits).numpy(), torch.cat(feats).numpy()

    def predict_proba(self, X):
        return 1.0 / (1.0 + np.exp(-self._forward(X)[0]))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def transform(self, X):
        return self._forward(X)[1].astype(np.float64)

    def score(self, X, y):
        return attribute_accuracy(X, y, self)

    def _get_state(self) -> dict:
        check_is_fitted(self)
        return {"module": self.module_.state_dict(), "n_attributes": self.n_attributes_}

    def _set_state(self, state: dict):
        self.n_attributes_ = int(state["n_attributes"])
        self.module_ = _ConvStack(self.n_attributes_)
        self.module_.load_state_dict(state["module"])
        self.module_.eval()
        return self

    def normalized_taps(self, X) -> list[torch.Tensor]:
        check_is_fitted(self)
        X = torch.from_numpy(check_images(X))
        with torch.no_grad():
            taps = self.module_.taps(X)
        return [t / (t.norm(dim=1, keepdim=True) + 1e-10) for t in taps]

    def perceptual_distance(self, x, y) -> np.ndarray:
        """Row-wise distance: spatial mean of squared differences of unit-normalized
        activations, summed over stages."""
        tx, ty = self.normalized_taps(x), self.normalized_taps(y)
        d = sum(((a - b) ** 2).sum(dim=1).mean(dim=(1, 2)) for a, b in zip(tx, ty))
        return d.numpy().astype(np.float64)


class _SegNet(nn.Module):
    def __init__(self, n_classes, w=32):
        super().__init__()

        def block(i, o, stride=1):
            return nn.Sequential(nn.Conv2d(i, o, 3, stride=stride, padding=1), nn.GroupNorm(8, o),
                                 nn.SiLU(), nn.Conv2d(o, o, 3, padding=1), nn.GroupNorm(8, o), nn.SiLU())

        self.enc1 = block(3, w)
        self.enc2 = block(w, 2 * w, 2)
        self.enc3 = block(2 * w, 2 * w, 2)
        self.dec2 = block(4 * w, 2 * w)
        self.dec1 = block(3 * w, w)
        self.out = nn.Conv2d(w, n_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2), e1], 1))
        return self.out(d1)


class MaskSegmenter(BaseEstimator):
    """Per-pixel part classifier; ``predict`` returns one-hot mask stacks."""

    def __init__(self, epochs=6, batch_size=64, lr=1e-3, random_state=0, verbose=False):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, masks):
        X = torch.from_numpy(check_images(X))
        masks = check_masks(masks, size=X.shape[-1])
        if len(X) != len(masks):
            raise ContractError("images and masks differ in length")
        self.n_parts_ = masks.shape[1]
        labels = torch.from_numpy(_labels(masks)).long()
        torch.manual_seed(self.random_state)
        self.module_ = net = _SegNet(self.n_parts_ + 1)
        gen = torch.Generator().manual_seed(self.random_state)
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        net.train()
        for epoch in range(self.epochs):
            perm = torch.randperm(len(X), generator=gen)
            total = 0.0
            for sl in batches(len(X), self.batch_size):
                idx = perm[sl]
                loss = F.cross_entropy(net(_augment(X[idx], gen)), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            if self.verbose:
                print(f"segmenter epoch {epoch + 1}: ce={total / len(X):.4f}", flush=True)
        net.eval()
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_images(X)
        out = []
        with torch.no_grad():
            for sl in batches(len(X), 256):
                out.append(self.module_(torch.from_numpy(X[sl])).argmax(dim=1))
        labels = torch.cat(out).numpy()
        return np.stack([(labels == c + 1) for c in range(self.n_parts_)], axis=1).astype(np.uint8)

    def score(self, X, masks):
        return miou(self.predict(X), masks)

    def _get_state(self) -> dict:
        check_is_fitted(self)
        return {"module": self.module_.state_dict(), "n_parts": self.n_parts_}

    def _set_state(self, state: dict):
        self.n_parts_ = int(state["n_parts"])
        self.module_ = _SegNet(self.n_parts_ + 1)
        self.module_.load_state_dict(state["module"])
        self.module_.eval()
        return self


def attribute_accuracy(images, attrs, clf) -> float:
    """Mean per-bit agreement of ``clf.predict(images)`` with ``attrs``."""
    attrs = check_attributes(attrs)
    images = check_images(images)
    if len(images) != len(attrs):
        raise ContractError(f"{len(images)} images but {len(attrs)} attribute rows")
    return float(np.mean(clf.predict(images) == attrs))


def pairwise_diversity(images, extractor: FeatureExtractor) -> float:
    """Mean perceptual distance over all unordered pairs of ``images``."""
    images = check_images(images)
    if len(images) < 2:
        raise ContractError("need at least 2 images")
    pairs = list(combinations(range(len(images)), 2))
    i, j = (np.array(v) for v in zip(*pairs))
    return float(np.mean(extractor.perceptual_distance(images[i], images[j])))


def diversity_lpips(model, cond=None, n: int = 10, extractor: FeatureExtractor = None,
                    eta: float = 1.0, steps: Optional[int] = None, seed: int = 0,
                    strict: bool = True) -> float:
    """Diversity of ``n`` stochastic samples drawn for one fixed condition.

    ``cond`` is a dict with ``attributes`` and/or ``masks`` for a single
    condition (or ``None`` for the unconditional model).
    """
    if n < 2:
        raise ContractError("n must be >= 2")
    if eta == 0:
        raise ContractError("diversity is defined for the stochastic sampler only (eta > 0)")
    single_ndim = {"attributes": 1, "masks": 3}
    rep = {}
    for key, value in (cond or {}).items():
        value = np.asarray(value)
        if value.ndim == single_ndim[key]:
            value = value[None]
        if len(value) != 1:
            raise ContractError(f"{key}: expected a single condition, got {len(value)}")
        rep[key] = np.repeat(value, n, axis=0)
    images = model.sample(n=n, steps=steps, eta=eta, seed=seed, strict=strict, **rep)
    return pairwise_diversity(images, extractor)


@dataclass
class EvalReport:
    fid: float
    kid: float
    attr_acc: float
    mask_acc: float
    miou: float
    lpips_mean: float
    n: int
    n_lpips_conditions: int = 0
    n_lpips_samples: int = 10
    mode: str = ""
    steps: int = 0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("attr_acc", "mask_acc", "miou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.fid < 0:
            raise ContractError("fid must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        if header:
            writer.writerow(self.csv_header())
        writer.writerow([getattr(self, k) for k in self.csv_header()])
        return buf.getvalue()


def evaluate(model, val, extractor: FeatureExtractor, segmenter: MaskSegmenter,
             n: Optional[int] = None, steps: Optional[int] = None, eta: float = 0.0,
             seed: int = 0, n_lpips_conditions: int = 20, n_lpips_samples: int = 10,
             lpips_eta: float = 1.0) -> EvalReport:
    """Sample one image per validation condition and score it.

    Quality compares the generated set to the validation images; fidelity
    compares each sample to the condition it was generated from; diversity
    draws ``n_lpips_samples`` stochastic samples for each of the first
    ``n_lpips_conditions`` validation conditions.
    """
    n = len(val) if n is None else min(int(n), len(val))
    sub = val.subset(np.arange(n))
    kwargs = _condition_kwargs(model, sub.attrs, sub.masks)
    generated = model.sample(n=n, steps=steps, eta=eta, seed=seed, **kwargs)
    real_feats = extractor.transform(sub.images)
    fake_feats = extractor.transform(generated)
    seg = segmenter.predict(generated)
    lp = []
    for i in range(min(n_lpips_conditions, n)):
        cond = _condition_kwargs(model, sub.attrs[i], sub.masks[i])
        lp.append(diversity_lpips(model, cond, n_lpips_samples, extractor, lpips_eta, steps,
                                  seed + 1 + i))
    return EvalReport(
        fid=frechet_distance(real_feats, fake_feats),
        kid=kernel_distance(real_feats, fake_feats),
        attr_acc=attribute_accuracy(generated, sub.attrs, extractor),
        mask_acc=mask_accuracy(seg, sub.masks),
        miou=miou(seg, sub.masks),
        lpips_mean=float(np.mean(lp)) if lp else float("nan"),
        n=n, n_lpips_conditions=len(lp), n_lpips_samples=n_lpips_samples,
        mode=getattr(model, "mode", ""), steps=int(steps or getattr(model, "sample_steps", 0)),
        eta=float(eta), seed=int(seed))


def _condition_kwargs(model, attrs, masks) -> dict:
    mode = getattr(model, "mode", "uncond")
    out = {}
    if mode in ("attr", "multi"):
        out["attributes"] = attrs
    if mode in ("mask_pooled", "mask_nopool", "multi"):
        out["masks"] = masks
    return out
