"""scikit-learn style estimator facade over the diffusion trainer.

``MambaDiffusion`` is a generative estimator in the mold of
``KernelDensity`` or ``GaussianMixture``: ``fit(X, y)`` trains the
denoiser on a batch of images, ``sample`` draws new ones, and
``score`` returns the negative denoising loss on held-out data. All
constructor arguments are plain hyperparameters, so ``get_params``,
``set_params``, cloning and grid search work as usual.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from .config import RunConfig
from .diffusion import cfg_predict, sample_loop, training_loss
from .tensor import tensor
from .training import ArrayDataset, Trainer
from .validation import check_images, check_labels


class MambaDiffusion(BaseEstimator):
    """Class-conditional image diffusion model with a selective-scan backbone.

    Parameters mirror the run configuration; see the package README for
    the full key reference. Images are float arrays in [-1, 1] with shape
    (n_samples, channels, height, width) and height/width divisible by
    ``patch``.
    """

    def __init__(
        self,
        depth: int = 4,
        hidden: int = 64,
        state_size: int = 4,
        expand: int = 1,
        patch: int = 2,
        n_classes: int = 8,
        train_steps: int = 500,
        batch_size: int = 32,
        lr: float = 2e-4,
        label_dropout: float = 0.1,
        timesteps: int = 1000,
        sample_steps: int = 50,
        guidance_scale: float = 1.0,
        seed: int = 0,
    ):
        self.depth = depth
        self.hidden = hidden
        self.state_size = state_size
        self.expand = expand
        self.patch = patch
        self.n_classes = n_classes
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.label_dropout = label_dropout
        self.timesteps = timesteps
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.seed = seed

    # -- estimator API ---------------------------------------------------------

    def _run_config(self, X: np.ndarray) -> RunConfig:
        return RunConfig(
            channels=X.shape[1],
            patch=self.patch,
            hidden=self.hidden,
            depth=self.depth,
            state_size=self.state_size,
            expand=self.expand,
            classes=self.n_classes,
            timesteps=self.timesteps,
            lr=self.lr,
            train_steps=self.train_steps,
            batch_size=min(self.batch_size, X.shape[0]),
            resolution=X.shape[2],
            seed=self.seed,
            label_dropout=self.label_dropout,
            dataset="array",
            sample_steps=self.sample_steps,
            cfg_scale=self.guidance_scale,
        )

    def fit(self, X, y=None):
        """Train the denoiser on images ``X`` with optional class labels ``y``.

        With ``y=None`` every image carries the null class (unconditional
        model). Returns self.
        """
        X = check_images(X, patch=self.patch)
        if y is None:
            labels = np.full(X.shape[0], self.n_classes, dtype=np.int64)
        else:
            labels = check_labels(y, X.shape[0], self.n_classes)
        cfg = self._run_config(X)
        trainer = Trainer(cfg, dataset=ArrayDataset(X, labels))
        losses = [trainer.train_step(step)[0] for step in range(cfg.train_steps)]
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.loss_history_ = losses
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this MambaDiffusion instance is not fitted yet; call fit first")

    def sample(self, n_samples: int = 1, label: int | None = None, random_state: int = 0) -> np.ndarray:
        """Generate images; ``label=None`` samples unconditionally."""
        self._check_fitted()
        model = self.model_
        sched = self.trainer_.schedule
        if label is None:
            labels = np.full(n_samples, model.cfg.null_class, dtype=np.int64)
            scale = 0.0
        else:
            labels = np.full(n_samples, int(label), dtype=np.int64)
            scale = self.guidance_scale

        def eps(x, t):
            tt = np.full(x.shape[0], t, dtype=np.float64)
            return cfg_predict(model, tensor(x), tt, labels, scale).data

        rng = np.random.default_rng([self.seed, 3, random_state])
        shape = (n_samples,) + self.image_shape_
        return sample_loop(sched, eps, shape, self.sample_steps, rng)

    def score(self, X, y=None) -> float:
        """Negative denoising loss on ``X`` (higher is better)."""
        self._check_fitted()
        X = check_images(X, patch=self.patch)
        if y is None:
            labels = np.full(X.shape[0], self.n_classes, dtype=np.int64)
        else:
            labels = check_labels(y, X.shape[0], self.n_classes)
        rng = np.random.default_rng([self.seed, 4])
        loss = training_loss(self.model_, self.trainer_.schedule, X, labels, rng, label_dropout=0.0)
        return -loss.item()
