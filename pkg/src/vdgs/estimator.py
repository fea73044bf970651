"""scikit-learn style wrapper around training and rendering.

``fit`` takes a dataset (a :class:`~vdgs.io.DatasetManifest` or a path
accepted by :func:`~vdgs.io.load_transforms`), ``predict`` maps cameras to
images and ``score`` is mean PSNR against reference images.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .io import DatasetManifest, load_transforms
from .metrics import psnr
from .rasterizer import render
from .trainer import TrainConfig, train


class VDGSEstimator(BaseEstimator):
    def __init__(self, variant: str = "opacity_mul", iterations: int = 5000, mode: str = "joint",
                 seed: int = 0, sh_degree: int = 3, lambda_ssim: float = 0.2, deterministic: bool = True,
                 config_overrides: dict | None = None):
        self.variant = variant
        self.iterations = iterations
        self.mode = mode
        self.seed = seed
        self.sh_degree = sh_degree
        self.lambda_ssim = lambda_ssim
        self.deterministic = deterministic
        self.config_overrides = config_overrides

    def make_config(self) -> TrainConfig:
        d = dict(variant=self.variant, iterations=self.iterations, mode=self.mode, seed=self.seed,
                 sh_degree=self.sh_degree, lambda_ssim=self.lambda_ssim, deterministic=self.deterministic)
        d.update(self.config_overrides or {})
        return TrainConfig.from_dict(d)

    def fit(self, X, y=None):
        """Train on dataset ``X``; ``y`` is ignored (images live in the dataset)."""
        dataset = X if isinstance(X, DatasetManifest) else load_transforms(X)
        self.config_ = self.make_config()
        self.state_, self.history_ = train(self.config_, dataset)
        self.background_ = dataset.background.copy()
        self.n_gaussians_ = len(self.state_.cloud)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X) -> list:
        """Render each camera in ``X``; returns a list of (H, W, 3) images in [0, 1]."""
        self._check_fitted()
        st = self.state_
        return [np.clip(render(st.cloud, cam, st.grid, st.mlp, st.variant, background=self.background_).image, 0, 1)
                for cam in X]

    def score(self, X, y) -> float:
        """Mean PSNR of the renders of cameras ``X`` against images ``y``."""
        preds = self.predict(X)
        return float(np.mean([psnr(p, t) for p, t in zip(preds, y)]))
