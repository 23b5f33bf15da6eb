"""Conditional latent diffusion estimator."""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator

from ._exceptions import ConfigurationError, ContractError, TrainingDivergedError
from ._validation import batches, check_attributes, check_images, check_is_fitted, check_masks
from .conditioning import MODES, ConditionEncoder, ConditionTokens
from .denoiser import DenoiserNet, SpatialTransformerConfig
from .diffusion import forward_diffuse, p2_latent_loss, sample as ddim_sample
from .schedules import P2Config, make_schedule

__all__ = ["LatentDiffusion"]


class LatentDiffusion(BaseEstimator):
    """Denoising diffusion in a codec's latent space with cross-attention conditioning.

    ``mode`` selects the condition: ``uncond``, ``attr`` (attribute MLP),
    ``mask_pooled`` / ``mask_nopool`` (mask encoder with or without global
    pooling) or ``multi`` (attribute token followed by spatial mask tokens).
    The loss is the P2-weighted noise regression; ``p2_gamma=0`` gives the
    plain objective.

    Parameters
    ----------
    codec : VQCodec
        Fitted codec; its ``transform`` output is the diffusion space.
    mode : str
    schedule, timesteps, beta_start, beta_end : schedule construction.
    p2_k, p2_gamma : float
        Weighting ``1 / (p2_k + SNR)^p2_gamma``.
    epochs, batch_size, lr : training schedule (Adam, no warmup).
    base_channels, channel_mult, heads, head_dim, transformer_levels : U-Net shape.
    sample_steps : int
        Default number of DDIM steps for :meth:`sample`.
    warm_start : bool
        Continue from the current state up to ``epochs`` total epochs.
    random_state : int
        Seed for initialization, batch order, timesteps and noise.
    """

    def __init__(self, codec=None, mode="uncond", schedule="linear", timesteps=1000,
                 beta_start=1e-4, beta_end=2e-2, p2_k=1.0, p2_gamma=0.5, epochs=20,
                 batch_size=64, lr=1e-4, base_channels=32, channel_mult=(1, 2, 2), heads=4,
                 head_dim=16, transformer_levels=(1, 2), sample_steps=50, warm_start=False,
                 random_state=0, verbose=False):
        self.codec = codec
        self.mode = mode
        self.schedule = schedule
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.p2_k = p2_k
        self.p2_gamma = p2_gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.base_channels = base_channels
        self.channel_mult = channel_mult
        self.heads = heads
        self.head_dim = head_dim
        self.transformer_levels = transformer_levels
        self.sample_steps = sample_steps
        self.warm_start = warm_start
        self.random_state = random_state
        self.verbose = verbose

    # construction ------------------------------------------------------------

    @property
    def p2_config(self) -> P2Config:
        return P2Config(self.p2_k, self.p2_gamma)

    def _check_params(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "timesteps", "sample_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.codec is None:
            raise ConfigurationError("codec: a fitted VQCodec is required")
        check_is_fitted(self.codec)

    def _init_modules(self, latent_shape, n_attributes, n_parts, size):
        torch.manual_seed(self.random_state)
        st = SpatialTransformerConfig(self.heads, self.head_dim, tuple(self.transformer_levels))
        self.schedule_ = make_schedule(self.schedule, self.timesteps, self.beta_start, self.beta_end)
        self.module_ = DenoiserNet(latent_shape[0], latent_shape[1], self.base_channels,
                                   tuple(self.channel_mult), st)
        self.encoder_ = ConditionEncoder(self.mode, n_attributes, n_parts, size, st.width)
        self.optimizer_ = torch.optim.Adam(self.parameters(), lr=self.lr)
        self.rng_ = torch.Generator().manual_seed(self.random_state)
        self.n_attributes_, self.n_parts_, self.image_size_ = n_attributes, n_parts, size
        self.latent_shape_ = tuple(latent_shape)
        self.epoch_ = 0
        self.loss_history_ = []
        self.t_counts_ = np.zeros(self.timesteps, dtype=np.int64)

    def parameters(self):
        return list(self.module_.parameters()) + list(self.encoder_.parameters())

    # training ------------------------------------------------------------------

    def fit(self, X, attributes=None, masks=None, epoch_callback=None):
        """Train on images ``X`` with the conditions the mode requires.

        Conditions the mode does not use are ignored. ``epoch_callback`` is
        called with the estimator after every epoch.
        """
        self._check_params()
        X = check_images(X)
        n_attr = n_parts = None
        if self.mode not in ("attr", "multi"):
            attributes = None
        if self.mode not in ("mask_pooled", "mask_nopool", "multi"):
            masks = None
        if self.mode in ("attr", "multi"):
            if attributes is None:
                raise ContractError(f"mode {self.mode!r} needs attributes")
            attributes = check_attributes(attributes)
            n_attr = attributes.shape[1]
        if self.mode in ("mask_pooled", "mask_nopool", "multi"):
            if masks is None:
                raise ContractError(f"mode {self.mode!r} needs masks")
            masks = check_masks(masks, size=X.shape[-1])
            n_parts = masks.shape[1]
        for arr in (attributes, masks):
            if arr is not None and len(arr) != len(X):
                raise ContractError("conditions and images differ in length")
        if len(X) == 0:
            raise ContractError("cannot fit on an empty dataset")
        latents = torch.from_numpy(self.codec.transform(X))
        if not (self.warm_start and getattr(self, "module_", None) is not None):
            self._init_modules(latents.shape[1:], n_attr or 8, n_parts or 6, X.shape[-1])
        attributes = None if attributes is None else torch.from_numpy(attributes)
        masks = None if masks is None else torch.from_numpy(masks)
        while self.epoch_ < self.epochs:
            self._run_epoch(latents, attributes, masks)
            if epoch_callback is not None:
                epoch_callback(self)
        return self

    def _run_epoch(self, latents, attributes, masks):
        self.module_.train()
        self.encoder_.train()
        gen = self.rng_
        n = len(latents)
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for sl in batches(n, self.batch_size):
            idx = perm[sl]
            z0 = latents[idx]
            t = torch.randint(1, self.timesteps + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            z_t = forward_diffuse(z0, t, eps, self.schedule_)
            cond = self.encoder_(None if attributes is None else attributes[idx],
                                 None if masks is None else masks[idx])
            eps_hat = self.module_(z_t, t, None if cond is None else cond.tokens)
            loss = p2_latent_loss(eps, eps_hat, t, self.schedule_, self.p2_config)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {self.epoch_ + 1}", checkpoint_path=None)
            self.optimizer_.zero_grad()
            loss.backward()
            self.optimizer_.step()
            total += loss.item() * len(idx)
            self.t_counts_ += np.bincount(t.numpy() - 1, minlength=self.timesteps)
        self.epoch_ += 1
        self.loss_history_.append(total / n)
        if self.verbose:
            print(f"[{self.mode}] epoch {self.epoch_}: loss={total / n:.4f}", flush=True)

    # inference ---------------------------------------------------------------------

    def encode_condition(self, attributes=None, masks=None, strict=True):
        """Condition tokens for a batch, or ``None`` for the unconditional mode."""
        check_is_fitted(self)
        if attributes is not None:
            attributes = torch.from_numpy(check_attributes(attributes, self.n_attributes_))
        if masks is not None:
            masks = torch.from_numpy(
                check_masks(masks, self.n_parts_, self.image_size_, strict=strict))
        return self.encoder_(attributes, masks, strict=strict)

    def predict_noise(self, z_t, t, cond=None):
        """``eps_theta(z_t, t, cond)``; ``cond`` may be tokens, a tensor or ``None``."""
        check_is_fitted(self)
        if isinstance(cond, ConditionTokens):
            cond = cond.tokens
        return self.module_(z_t, t, cond)

    def sample_latents(self, n=None, attributes=None, masks=None, steps=None, eta=0.0, seed=0,
                       strict=True, cond=None):
        check_is_fitted(self)
        steps = self.sample_steps if steps is None else int(steps)
        if cond is None and self.mode != "uncond":
            cond = self.encode_condition(attributes, masks, strict=strict)
        if cond is not None:
            n_cond = cond.tokens.shape[0]
            if n is not None and n != n_cond:
                raise ContractError(f"n={n} but {n_cond} conditions given")
            n = n_cond
        if n is None or n < 1:
            raise ContractError("n must be >= 1")
        self.module_.eval()
        self.encoder_.eval()
        tokens = None if cond is None else cond.tokens.detach()

        def model(z, t, c):
            return self.module_(z, t, c)

        with torch.no_grad():
            return ddim_sample(model, tokens, steps, eta, seed, self.schedule_,
                               (n,) + self.latent_shape_)

    def sample(self, n=None, attributes=None, masks=None, steps=None, eta=0.0, seed=0,
               strict=True, cond=None):
        """Generate images in [-1, 1] by DDIM sampling and decoding.

        For conditional modes ``n`` is taken from the number of conditions.
        """
        z = self.sample_latents(n, attributes, masks, steps, eta, seed, strict, cond)
        return self.codec.inverse_transform(z.numpy())

    # serialization -------------------------------------------------------------------

    def _get_state(self) -> dict:
        check_is_fitted(self)
        return {
            "denoiser": self.module_.state_dict(),
            "encoder": self.encoder_.state_dict(),
            "optimizer": self.optimizer_.state_dict(),
            "rng": self.rng_.get_state(),
            "epoch": self.epoch_,
            "loss_history": list(self.loss_history_),
            "t_counts": torch.from_numpy(self.t_counts_),
            "schedule": self.schedule_.to_dict(),
            "dims": [list(self.latent_shape_), self.n_attributes_, self.n_parts_, self.image_size_],
        }

    def _set_state(self, state: dict):
        latent_shape, n_attr, n_parts, size = state["dims"]
        self._init_modules(tuple(latent_shape), n_attr, n_parts, size)
        self.module_.load_state_dict(state["denoiser"])
        self.encoder_.load_state_dict(state["encoder"])
        self.optimizer_.load_state_dict(state["optimizer"])
        self.rng_.set_state(state["rng"])
        self.epoch_ = int(state["epoch"])
        self.loss_history_ = list(state["loss_history"])
        self.t_counts_ = state["t_counts"].numpy().copy()
        return self

    def n_parameters(self) -> int:
        return sum(math.prod(p.shape) for p in self.parameters())
