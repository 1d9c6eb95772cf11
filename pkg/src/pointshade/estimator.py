"""Scikit-learn style facade over model building, training and prediction.

``ShadingRegressor`` fits on a list of :class:`PointCloud` scenes carrying
shading targets and predicts per-point shading for new scenes, so the
operator drops into sklearn pipelines and parameter searches unchanged.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cloud import DEFAULT_HIERARCHY_RADII, PointCloud, build_hierarchy, poisson_disk_indices
from .network import (
    Model,
    ModelConfig,
    attributes_for,
    forward_2d_only,
    forward_3d,
    project_to_pixels,
    splat_to_pixels,
)
from .seeding import derive_seed
from .train import TrainConfig, train_loop
from ._validation import check_scalar


class ShadingRegressor(BaseEstimator):
    """Per-point shading regressor (occlusion or indirect irradiance).

    Parameters mirror the architecture and optimizer settings; all are
    plain constructor arguments so ``get_params``/``set_params``/``clone``
    behave as sklearn expects.

    Examples
    --------
    >>> reg = ShadingRegressor(effect="ao", epochs=20).fit(train_clouds)
    >>> occlusion = reg.predict(test_cloud)
    """

    def __init__(self, effect="ao", variant="ours",
                 hierarchy_radii=DEFAULT_HIERARCHY_RADII, level_widths=(8, 16, 32, 64),
                 latent_channels=8, selection_radius=0.075, projection_radius=None,
                 kernel_hidden=(16, 16), within_radius_scale=2.0, use_skips=True,
                 learning_rate=0.005, lr_decay=0.7, lr_decay_every=10,
                 epochs=200, batch_size=8, seed=0, verbose=False):
        self.effect = effect
        self.variant = variant
        self.hierarchy_radii = hierarchy_radii
        self.level_widths = level_widths
        self.latent_channels = latent_channels
        self.selection_radius = selection_radius
        self.projection_radius = projection_radius
        self.kernel_hidden = kernel_hidden
        self.within_radius_scale = within_radius_scale
        self.use_skips = use_skips
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.verbose = verbose

    # -- sklearn plumbing ---------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            effect=self.effect,
            variant=self.variant,
            hierarchy_radii=tuple(self.hierarchy_radii),
            level_widths=tuple(self.level_widths),
            latent_channels=self.latent_channels,
            selection_radius=self.selection_radius,
            projection_radius=self.projection_radius,
            kernel_hidden=tuple(self.kernel_hidden),
            within_radius_scale=self.within_radius_scale,
            use_skips=self.use_skips,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            epochs=self.epochs,
            batch_size=self.batch_size,
            effect=self.effect,
            seed=self.seed,
        )

    def _check_fitted(self) -> Model:
        if not hasattr(self, "model_"):
            raise NotFittedError("this ShadingRegressor is not fitted yet; call fit first")
        return self.model_

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None, val_clouds=(), out_dir=None):
        """Train on a list of target-carrying PointClouds.  Returns self."""
        from .network import build_model  # deferred: keeps import cycles away

        clouds = [X] if isinstance(X, PointCloud) else list(X)
        if not clouds:
            raise ValueError("fit requires at least one training cloud")
        for i, c in enumerate(clouds):
            if not isinstance(c, PointCloud) or c.target is None:
                raise ValueError(f"training item {i} must be a PointCloud with targets")
        self.model_ = build_model(self._model_config(), seed=self.seed)
        log = print if self.verbose else None
        _, trace = train_loop(self.model_, clouds, self._train_config(),
                              val_clouds=val_clouds, out_dir=out_dir, log=log)
        self.loss_trace_ = trace
        self.n_parameters_ = self.model_.parameter_count()
        return self

    def predict(self, X):
        """Per-point shading for one cloud or a list of clouds."""
        model = self._check_fitted()
        if isinstance(X, PointCloud):
            return predict_points(model, X, seed=self.seed)
        return [predict_points(model, c, seed=self.seed) for c in X]

    def score(self, X, y=None):
        """Negative mean per-point MSE over clouds (larger is better)."""
        model = self._check_fitted()
        clouds = [X] if isinstance(X, PointCloud) else list(X)
        errs = []
        for c in clouds:
            if c.target is None:
                raise ValueError("scoring requires clouds with targets")
            pred = predict_points(model, c, seed=self.seed)
            errs.append(float(np.mean((pred - c.target) ** 2)))
        return -float(np.mean(errs))


def predict_points(model: Model, cloud: PointCloud, seed: int = 0,
                   selection_radius: float | None = None, clamp: bool = True) -> np.ndarray:
    """Evaluate a trained model at every point of a cloud.

    The model's input points are selected from the cloud at the model's
    Poisson radius (overridable); shading is then predicted at all cloud
    points, which at render time are image pixels and here are the cloud
    itself.
    """
    cfg = model.config
    radius = check_scalar(selection_radius if selection_radius is not None else cfg.selection_radius,
                          "selection_radius", minimum=0.0, strict=True)
    idx = poisson_disk_indices(cloud.positions.astype(np.float64), radius,
                               derive_seed(seed, "predict-select"))
    src = cloud.subset(idx)
    query_pos = cloud.positions.astype(np.float64)
    query_attrs = attributes_for(cfg, cloud)
    if cfg.variant == "2d-only":
        return forward_2d_only(model, src.positions.astype(np.float64), attributes_for(cfg, src),
                               query_pos, query_attrs, clamp=clamp)
    hierarchy = build_hierarchy(src, cfg.hierarchy_radii, seed=derive_seed(seed, "predict-hier"))
    level0 = hierarchy.levels[0]
    feats = forward_3d(model, hierarchy)
    if cfg.variant == "3d-only":
        out = splat_to_pixels(level0.positions, feats, query_pos, cfg.projection_radius)
        if clamp:
            out = np.clip(out, 0.0, 1.0) if cfg.effect == "ao" else np.maximum(out, 0.0)
        return out.astype(np.float32)
    return project_to_pixels(model, level0.positions.astype(np.float64), feats,
                             query_pos, query_attrs, clamp=clamp).astype(np.float32)
