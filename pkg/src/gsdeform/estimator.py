"""scikit-learn style front end over :class:`~gsdeform.training.Trainer`."""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .deformation import DeformedGaussians
from .metrics import psnr, ssim
from .training import Trainer, TrainConfig, config_from_dict
from .validation import check_dataset, check_frames, check_time, check_views


class DeformableGaussianSplatting(BaseEstimator):
    """Fit a deformable Gaussian scene to posed, timestamped images.

    Every constructor argument is a training-config key with the same
    default.  ``fit`` accepts a :class:`~gsdeform.data.Dataset`, a dataset
    directory or a list of frames; ``predict`` renders frames or
    ``(camera, t)`` pairs; ``transform`` returns deformed Gaussian centres
    at the requested timestamps; ``score`` is the mean PSNR.

    Fitted attributes: ``trainer_``, ``n_gaussians_``, ``history_``.
    """

    def __init__(
        self,
        *,
        iterations=3000,
        warmup=-1,
        seed=0,
        precision=64,
        background="1,1,1",
        sh_degree=1,
        n_init=2000,
        init_extent=1.3,
        init_opacity=0.1,
        grid_size=0.0,
        use_geometry=True,
        lam=0.2,
        omega=0.01,
        densify_grad=2e-4,
        densify_opacity=0.005,
        densify_scale=0.01,
        densify_interval=100,
        densify_from=500,
        densify_until=-1,
        max_gaussians=5000,
        lr_position_init=1.6e-4,
        lr_position_final=1.6e-6,
        lr_sh=2.5e-3,
        lr_opacity=0.05,
        lr_scale=5e-3,
        lr_rotation=1e-3,
        lr_net_init=8e-4,
        lr_net_final=1.6e-6,
        eval_interval=100,
        checkpoint_interval=0,
    ):
        self.iterations = iterations
        self.warmup = warmup
        self.seed = seed
        self.precision = precision
        self.background = background
        self.sh_degree = sh_degree
        self.n_init = n_init
        self.init_extent = init_extent
        self.init_opacity = init_opacity
        self.grid_size = grid_size
        self.use_geometry = use_geometry
        self.lam = lam
        self.omega = omega
        self.densify_grad = densify_grad
        self.densify_opacity = densify_opacity
        self.densify_scale = densify_scale
        self.densify_interval = densify_interval
        self.densify_from = densify_from
        self.densify_until = densify_until
        self.max_gaussians = max_gaussians
        self.lr_position_init = lr_position_init
        self.lr_position_final = lr_position_final
        self.lr_sh = lr_sh
        self.lr_opacity = lr_opacity
        self.lr_scale = lr_scale
        self.lr_rotation = lr_rotation
        self.lr_net_init = lr_net_init
        self.lr_net_final = lr_net_final
        self.eval_interval = eval_interval
        self.checkpoint_interval = checkpoint_interval

    def to_config(self) -> TrainConfig:
        """Validated training config built from the current parameters."""
        return config_from_dict(self.get_params()).validate()

    def fit(self, X, y=None, callback=None):
        ds = check_dataset(X)
        self.trainer_ = Trainer(ds, self.to_config())
        self.history_ = self.trainer_.train(callback=callback)
        self.n_gaussians_ = len(self.trainer_.cloud)
        return self

    @classmethod
    def from_checkpoint(cls, path, dataset) -> "DeformableGaussianSplatting":
        trainer = Trainer.load(path, check_dataset(dataset))
        est = cls(**dataclasses.asdict(trainer.cfg))
        est.trainer_ = trainer
        est.history_ = []
        est.n_gaussians_ = len(trainer.cloud)
        return est

    def save(self, path):
        check_is_fitted(self, "trainer_")
        return self.trainer_.save(path)

    def render(self, camera, t) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        return self.trainer_.render_image(camera, check_time(t))

    def predict(self, X) -> np.ndarray:
        """Render each view; returns ``(n, H, W, 3)`` (views must share a resolution)."""
        check_is_fitted(self, "trainer_")
        views = check_views(X)
        return np.stack([self.trainer_.render_image(cam, t) for cam, t in views]) if views else np.zeros((0, 0, 0, 3))

    def deformed(self, t) -> DeformedGaussians:
        check_is_fitted(self, "trainer_")
        with torch.no_grad():
            g, _ = self.trainer_.deformed(check_time(t))
        return g

    def transform(self, X) -> np.ndarray:
        """Deformed centres at each timestamp in ``X``, shape ``(len(X), N, 3)``."""
        times = np.atleast_1d(np.asarray(X, dtype=np.float64))
        return np.stack([self.deformed(t).positions.detach().to(torch.float64).numpy() for t in times])

    def evaluate(self, X) -> list[dict]:
        """Per-frame PSNR and SSIM rows."""
        check_is_fitted(self, "trainer_")
        rows = []
        for f in check_frames(X):
            image = self.trainer_.render_image(f.camera, f.t)
            rows.append({"name": f.name, "t": f.t, "psnr": psnr(image, f.image), "ssim": ssim(image, f.image)})
        return rows

    def score(self, X, y=None) -> float:
        rows = self.evaluate(X)
        if not rows:
            return float("nan")
        return float(np.mean([r["psnr"] for r in rows]))
