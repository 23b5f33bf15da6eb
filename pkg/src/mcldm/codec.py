"""Small VQ-regularized autoencoder mapping 32x32 images to 8x8 latents."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from ._exceptions import ContractError
from ._validation import batches, check_images, check_is_fitted

__all__ = ["quantize", "VQAutoencoder", "VQCodec", "psnr"]

REDUCTION = 4


def quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Replace every spatial vector of ``z`` by its nearest codebook row.

    ``z`` is ``(B, C, H, W)`` and ``codebook`` is ``(K, C)``. Returns the
    quantized tensor and the ``(B, H, W)`` index map.
    """
    if z.ndim != 4 or z.shape[1] != codebook.shape[1]:
        raise ContractError(
            f"latent channels {tuple(z.shape)} do not match codebook width {codebook.shape[1]}")
    b, c, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, c)
    dist = (flat.pow(2).sum(1, keepdim=True) - 2 * flat @ codebook.t()
            + codebook.pow(2).sum(1)[None])
    idx = dist.argmin(dim=1)
    zq = codebook[idx].reshape(b, h, w, c).permute(0, 3, 1, 2)
    return zq, idx.reshape(b, h, w)


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [-1, 1]."""
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(4.0 / mse)


class _Res(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.block(x)


class VQAutoencoder(nn.Module):
    def __init__(self, latent_channels=4, n_codes=64, hidden=32):
        super().__init__()
        h2 = 2 * hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1), _Res(hidden),
            nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), _Res(hidden),
            nn.Conv2d(hidden, h2, 4, stride=2, padding=1), _Res(h2),
            nn.GroupNorm(8, h2), nn.SiLU(), nn.Conv2d(h2, latent_channels, 1))
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, h2, 3, padding=1), _Res(h2),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(h2, hidden, 3, padding=1), _Res(hidden),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hidden, hidden, 3, padding=1), _Res(hidden),
            nn.GroupNorm(8, hidden), nn.SiLU(), nn.Conv2d(hidden, 3, 3, padding=1))
        codebook = torch.empty(n_codes, latent_channels).uniform_(-1.0 / n_codes, 1.0 / n_codes)
        self.codebook = nn.Parameter(codebook)

    def forward(self, x):
        z = self.encoder(x)
        zq, idx = quantize(z, self.codebook)
        # straight-through: decoder sees zq, encoder receives the decoder gradient
        z_st = z + (zq - z).detach()
        return self.decoder(z_st), z, zq, idx


class VQCodec(BaseEstimator, TransformerMixin):
    """Image <-> latent codec with a 4x spatial reduction.

    ``transform`` returns the continuous encoder output multiplied by
    ``latent_scale_`` (roughly unit variance, ready for diffusion).
    ``inverse_transform`` undoes the scaling, snaps to the codebook and
    decodes to images clamped to [-1, 1].

    Parameters
    ----------
    latent_channels : int
        Channels of the latent map.
    n_codes : int
        Codebook size.
    hidden : int
        Width of the first conv stage; the second uses twice this.
    commitment : float
        Weight of the commitment term.
    epochs, batch_size, lr : training schedule (Adam).
    random_state : int
        Seed for initialization and batch order.
    """

    def __init__(self, latent_channels=4, n_codes=64, hidden=32, commitment=0.25, epochs=20,
                 batch_size=64, lr=2e-3, random_state=0, verbose=False):
        self.latent_channels = latent_channels
        self.n_codes = n_codes
        self.hidden = hidden
        self.commitment = commitment
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.verbose = verbose

    def _build(self):
        torch.manual_seed(self.random_state)
        return VQAutoencoder(self.latent_channels, self.n_codes, self.hidden)

    def fit(self, X, y=None):
        X = check_images(X, divisible_by=REDUCTION)
        self.module_ = model = self._build()
        gen = torch.Generator().manual_seed(self.random_state)
        data = torch.from_numpy(X)
        # seed the codebook from encoder outputs so no entry starts dead
        with torch.no_grad():
            z = model.encoder(data[: min(len(data), 512)]).permute(0, 2, 3, 1).reshape(-1, self.latent_channels)
            pick = torch.randperm(z.shape[0], generator=gen)[: self.n_codes]
            model.codebook.copy_(z[pick])
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        self.history_ = []
        for epoch in range(self.epochs):
            perm = torch.randperm(len(data), generator=gen)
            usage = torch.zeros(self.n_codes)
            totals = np.zeros(3)
            model.train()
            for sl in batches(len(data), self.batch_size):
                x = data[perm[sl]]
                recon, z, zq, idx = model(x)
                rec = F.mse_loss(recon, x)
                cb = F.mse_loss(zq, z.detach())
                commit = F.mse_loss(z, zq.detach())
                loss = rec + cb + self.commitment * commit
                opt.zero_grad()
                loss.backward()
                opt.step()
                usage += torch.bincount(idx.flatten(), minlength=self.n_codes)
                totals += np.array([rec.item(), cb.item(), commit.item()]) * x.shape[0]
            self._restart_dead_codes(usage, data, gen)
            self.history_.append(totals / len(data))
            if self.verbose:
                print(f"codec epoch {epoch + 1}: recon={totals[0] / len(data):.5f}")
        model.eval()
        with torch.no_grad():
            z = torch.cat([model.encoder(data[sl]) for sl in batches(len(data), 256)])
        self.latent_scale_ = float(1.0 / z.std())
        self.latent_shape_ = tuple(z.shape[1:])
        return self

    def _get_state(self) -> dict:
        check_is_fitted(self)
        return {"module": self.module_.state_dict(), "latent_scale": self.latent_scale_,
                "latent_shape": list(self.latent_shape_),
                "history": [[float(v) for v in h] for h in getattr(self, "history_", [])]}

    def _set_state(self, state: dict):
        self.module_ = self._build()
        self.module_.load_state_dict(state["module"])
        self.module_.eval()
        self.latent_scale_ = float(state["latent_scale"])
        self.latent_shape_ = tuple(state["latent_shape"])
        self.history_ = [np.asarray(h) for h in state.get("history", [])]
        return self

    def _restart_dead_codes(self, usage, data, gen):
        dead = torch.nonzero(usage == 0).flatten()
        if len(dead) == 0:
            return
        with torch.no_grad():
            sel = torch.randperm(len(data), generator=gen)[:64]
            z = self.module_.encoder(data[sel]).permute(0, 2, 3, 1).reshape(-1, self.latent_channels)
            pick = torch.randint(0, z.shape[0], (len(dead),), generator=gen)
            self.module_.codebook[dead] = z[pick]

    # torch-level API -------------------------------------------------------

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Continuous latent ``(B, C_z, H/4, W/4)`` of images in [-1, 1]."""
        check_is_fitted(self)
        if x.ndim != 4 or x.shape[2] % REDUCTION or x.shape[3] % REDUCTION:
            raise ContractError(f"image sides must be divisible by {REDUCTION}, got {tuple(x.shape)}")
        return self.module_.encoder(x)

    def decode(self, z: torch.Tensor, quantized: bool = True) -> torch.Tensor:
        check_is_fitted(self)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ContractError(f"latent must be (B, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        if tuple(z.shape[1:]) != tuple(self.latent_shape_):
            raise ContractError(f"latent shape {tuple(z.shape[1:])} differs from the fitted {self.latent_shape_}")
        if quantized:
            z, _ = quantize(z, self.module_.codebook)
        return self.module_.decoder(z).clamp(-1.0, 1.0)

    @property
    def codebook_(self) -> torch.Tensor:
        check_is_fitted(self)
        return self.module_.codebook.detach()

    # sklearn API -------------------------------------------------------------

    def transform(self, X):
        check_is_fitted(self)
        X = check_images(X, divisible_by=REDUCTION)
        with torch.no_grad():
            out = [self.encode(torch.from_numpy(X[sl])) for sl in batches(len(X), 256)]
        return (torch.cat(out) * self.latent_scale_).numpy()

    def inverse_transform(self, Z):
        check_is_fitted(self)
        Z = torch.as_tensor(np.asarray(Z, dtype=np.float32))
        with torch.no_grad():
            out = [self.decode(Z[sl] / self.latent_scale_) for sl in batches(len(Z), 256)]
        return torch.cat(out).numpy()

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Reconstruction PSNR in dB."""
        X = check_images(X)
        return psnr(X, self.reconstruct(X))
