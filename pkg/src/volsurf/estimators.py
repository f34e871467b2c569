"""Scikit-learn style estimators wrapping the five volatility predictors.

Surface forecasters take windows ``X`` of shape (N, n, C, H, W) (or (N, n, H, W))
and next-day grids ``y`` of shape (N, H, W); ``predict`` returns (N, H, W).
Inputs are standardised per channel and targets de-standardised inside the
fitted module, so predictions are always in vol units.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .autodiff import DTYPE
from .convtf import ConvTfConfig, ConvTransformer
from .exceptions import ConfigError, ShapeError, TrainingDivergenceError
from .piconvtf import PhysicsLossConfig, piconvtf_loss
from .pinn import PinnNets, pinn_loss
from .recurrent import RecurrentForecaster
from .train_eval import mape, train_model
from .validation import check_market, check_points, check_surface_targets, check_windows

PREDICT_BATCH = 64


class Standardized(nn.Module):
    """Per-channel input standardisation around a core model, target rescaling after it."""

    def __init__(self, core: nn.Module, channel_mean, channel_std, target_mean: float, target_std: float):
        super().__init__()
        self.core = core
        self.register_buffer("channel_mean", torch.as_tensor(channel_mean, dtype=DTYPE))
        self.register_buffer("channel_std", torch.as_tensor(channel_std, dtype=DTYPE))
        self.register_buffer("target_mean", torch.tensor(float(target_mean), dtype=DTYPE))
        self.register_buffer("target_std", torch.tensor(float(target_std), dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = (x - self.channel_mean[:, None, None]) / self.channel_std[:, None, None]
        return self.target_mean + self.target_std * self.core(z)[:, 0]


def _safe_std(a: np.ndarray, axis=None) -> np.ndarray:
    s = np.std(a, axis=axis)
    return np.where(s < 1e-12, 1.0, s)


def _split_validation(arrays, fraction: float):
    n = arrays[0].shape[0]
    n_val = int(round(fraction * n))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"cannot carve a {fraction:.0%} validation tail from {n} samples")
    return [a[: n - n_val] for a in arrays], [a[n - n_val :] for a in arrays]


class _SurfaceForecaster(RegressorMixin, BaseEstimator):
    """Shared fit/predict machinery; subclasses provide ``_build_core``."""

    _needs_market = False

    def _build_core(self, n_channels: int) -> nn.Module:
        raise NotImplementedError

    def _loss(self, pred, target, market=None):
        return (pred - target).abs().mean()

    def _make_module(self, n_channels: int, stats: Dict[str, np.ndarray]) -> Standardized:
        return Standardized(
            self._build_core(n_channels),
            stats["channel_mean"], stats["channel_std"], stats["target_mean"], stats["target_std"],
        )

    def fit(self, X, y, market=None, eval_set=None):
        """Train on windows ``X`` and targets ``y``.

        ``eval_set`` is ``(X_val, y_val)`` (plus ``market_val`` for physics-informed
        models); without it the chronologically last ``validation_fraction`` of the
        samples is held out. The returned weights come from the epoch with the
        lowest validation MAPE.
        """
        X = check_windows(X)
        y = check_surface_targets(y, X.shape[0], X.shape[-2:])
        arrays = [X, y]
        if self._needs_market:
            if market is None:
                raise ShapeError(f"{type(self).__name__} needs market matrices")
            arrays.append(check_market(market, X.shape[0], X.shape[-2:]))
        if eval_set is None:
            arrays, val_arrays = _split_validation(arrays, self.validation_fraction)
        else:
            Xv = check_windows(eval_set[0])
            val_arrays = [Xv, check_surface_targets(eval_set[1], Xv.shape[0], Xv.shape[-2:])]
        X, y = arrays[0], arrays[1]

        self.window_ = X.shape[1]
        self.n_channels_ = X.shape[2]
        self.grid_shape_ = tuple(X.shape[-2:])
        self.stats_ = {
            "channel_mean": X.mean(axis=(0, 1, 3, 4)),
            "channel_std": _safe_std(X, axis=(0, 1, 3, 4)),
            "target_mean": np.array(y.mean()),
            "target_std": np.array(_safe_std(y)),
        }
        gen = torch.Generator().manual_seed(int(self.random_state))
        self.module_ = self._make_module(self.n_channels_, self.stats_)
        self.module_.core.reset_parameters(gen)
        self.n_sigma_clamped_ = 0

        tensors = [torch.as_tensor(a) for a in arrays]
        Xv_t = torch.as_tensor(val_arrays[0])
        yv = val_arrays[1]

        def loss_fn(module, xb, yb, *rest):
            return self._loss(module(xb), yb, *rest)

        def val_metric(module):
            return mape(self._predict_tensor(module, Xv_t), yv)

        try:
            result = train_model(
                self.module_, tensors, loss_fn, val_metric,
                epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                generator=gen, patience=self.lr_patience, factor=self.lr_factor, min_lr=self.min_lr,
                verbose=bool(self.verbose),
            )
        except TrainingDivergenceError as exc:
            self.history_ = exc.result.history
            self.best_epoch_ = exc.result.best_epoch
            exc.estimator = self  # best weights already restored; lets callers checkpoint them
            raise
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    @staticmethod
    def _predict_tensor(module: nn.Module, X: torch.Tensor) -> np.ndarray:
        module.eval()
        with torch.no_grad():
            out = [module(X[i : i + PREDICT_BATCH]) for i in range(0, X.shape[0], PREDICT_BATCH)]
        return torch.cat(out).numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "module_")
        X = check_windows(X)
        if X.shape[2] != self.n_channels_ or tuple(X.shape[-2:]) != self.grid_shape_:
            raise ShapeError(
                f"expected windows with {self.n_channels_} channels on a {self.grid_shape_} grid, "
                f"got shape {X.shape}"
            )
        return self._predict_tensor(self.module_, torch.as_tensor(X))

    def score(self, X, y, sample_weight=None) -> float:
        """Negative MAPE (higher is better)."""
        return -mape(self.predict(X), np.asarray(y, dtype=np.float64).reshape(-1, *self.grid_shape_))

    # checkpoint support
    def _fitted_meta(self) -> dict:
        return {
            "window_": self.window_,
            "n_channels_": self.n_channels_,
            "grid_shape_": list(self.grid_shape_),
            "best_epoch_": self.best_epoch_,
            "stats_": {k: np.asarray(v).tolist() for k, v in self.stats_.items()},
        }

    def _restore(self, meta: dict, state: Dict[str, torch.Tensor]) -> None:
        self.window_ = meta["window_"]
        self.n_channels_ = meta["n_channels_"]
        self.grid_shape_ = tuple(meta["grid_shape_"])
        self.best_epoch_ = meta["best_epoch_"]
        self.stats_ = {k: np.asarray(v) for k, v in meta["stats_"].items()}
        self.module_ = self._make_module(self.n_channels_, self.stats_)
        self.module_.load_state_dict(state)
        self.history_ = []


class ConvLSTMForecaster(_SurfaceForecaster):
    def __init__(self, hidden_channels=64, kernel_size=3, num_layers=1, use_bias=True,
                 epochs=100, batch_size=32, learning_rate=1e-3, lr_patience=5, lr_factor=0.5,
                 min_lr=1e-6, validation_fraction=0.2, random_state=0, verbose=0):
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.num_layers = num_layers
        self.use_bias = use_bias
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.min_lr = min_lr
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _build_core(self, n_channels):
        return RecurrentForecaster(n_channels, self.hidden_channels, self.kernel_size,
                                   self.num_layers, "plain", use_bias=self.use_bias)


class SAConvLSTMForecaster(_SurfaceForecaster):
    def __init__(self, hidden_channels=64, kernel_size=3, num_layers=1, qk_channels=8, use_bias=True,
                 epochs=100, batch_size=32, learning_rate=1e-3, lr_patience=5, lr_factor=0.5,
                 min_lr=1e-6, validation_fraction=0.2, random_state=0, verbose=0):
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.num_layers = num_layers
        self.qk_channels = qk_channels
        self.use_bias = use_bias
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.min_lr = min_lr
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _build_core(self, n_channels):
        return RecurrentForecaster(n_channels, self.hidden_channels, self.kernel_size, self.num_layers,
                                   "self_attention", qk_channels=self.qk_channels, use_bias=self.use_bias)


class ConvTFForecaster(_SurfaceForecaster):
    def __init__(self, hidden_channels=32, heads=4, num_layers=1, sffn_peak=128, head="sffn",
                 residual=True, epochs=100, batch_size=16, learning_rate=1e-3, lr_patience=5,
                 lr_factor=0.5, min_lr=1e-6, validation_fraction=0.2, random_state=0, verbose=0):
        self.hidden_channels = hidden_channels
        self.heads = heads
        self.num_layers = num_layers
        self.sffn_peak = sffn_peak
        self.head = head
        self.residual = residual
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.min_lr = min_lr
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _config(self, n_channels) -> ConvTfConfig:
        return ConvTfConfig(
            window=getattr(self, "window_", 10), in_channels=n_channels,
            hidden_channels=self.hidden_channels, heads=self.heads, num_layers=self.num_layers,
            sffn_peak=self.sffn_peak, head=self.head, residual=self.residual,
        )

    def _build_core(self, n_channels):
        return ConvTransformer(self._config(n_channels))


class PIConvTFForecaster(ConvTFForecaster):
    """ConvTF trained with the Black-Scholes physics term weighted by ``lam``.

    ``fit`` needs the target day's market stack (N, 4, H, W) in [tau; S; r; K] order.
    """

    _needs_market = True

    def __init__(self, hidden_channels=32, heads=4, num_layers=1, sffn_peak=128, head="sffn",
                 residual=True, lam=0.1, derivative_mode="pointwise_analytic", epochs=100,
                 batch_size=16, learning_rate=1e-3, lr_patience=5, lr_factor=0.5, min_lr=1e-6,
                 validation_fraction=0.2, random_state=0, verbose=0):
        super().__init__(hidden_channels, heads, num_layers, sffn_peak, head, residual, epochs,
                         batch_size, learning_rate, lr_patience, lr_factor, min_lr,
                         validation_fraction, random_state, verbose)
        self.lam = lam
        self.derivative_mode = derivative_mode

    def _loss(self, pred, target, market=None):
        stats = {}
        loss = piconvtf_loss(pred, target, market, PhysicsLossConfig(self.lam, self.derivative_mode), stats)
        self.n_sigma_clamped_ += stats.get("clamped", 0)
        return loss


class PersistenceForecaster(_SurfaceForecaster):
    """Baseline: tomorrow's surface equals the last vol map in the window."""

    def __init__(self, sigma_channel=0):
        self.sigma_channel = sigma_channel

    def fit(self, X, y=None, market=None, eval_set=None):
        X = check_windows(X)
        self.n_channels_ = X.shape[2]
        self.grid_shape_ = tuple(X.shape[-2:])
        self.module_ = None
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "grid_shape_")
        X = check_windows(X)
        return X[:, -1, self.sigma_channel].copy()


class PINNVolatilityRegressor(RegressorMixin, BaseEstimator):
    """Pointwise vol regressor over rows (S, tau, m, r) trained with the PDE-residual loss.

    Epochs are split over ``cycles`` training rounds; each round restarts the
    optimizer and LR schedule from the best weights of the previous one.
    """

    def __init__(self, hidden_units=10000, epochs=2000, batch_size=256, learning_rate=0.1, cycles=2,
                 spot_scale=None, lr_patience=5, lr_factor=0.5, min_lr=1e-6, validation_fraction=0.2,
                 random_state=0, verbose=0):
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cycles = cycles
        self.spot_scale = spot_scale
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.min_lr = min_lr
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y, eval_set=None):
        X, y = check_points(X, y)
        if eval_set is None:
            (X, y), (Xv, yv) = _split_validation([X, y], self.validation_fraction)
        else:
            Xv, yv = check_points(*eval_set)
        self.spot_scale_ = float(self.spot_scale if self.spot_scale is not None else X[0, 0])
        gen = torch.Generator().manual_seed(int(self.random_state))
        self.module_ = PinnNets(self.hidden_units, self.spot_scale_)
        self.module_.reset_parameters(gen)
        Xv_t = torch.as_tensor(Xv)

        def loss_fn(module, xb, yb):
            return pinn_loss(module, xb, yb)

        def val_metric(module):
            return mape(self._predict_tensor(module, Xv_t), yv)

        try:
            result = train_model(
                self.module_, [torch.as_tensor(X), torch.as_tensor(y)], loss_fn, val_metric,
                epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                generator=gen, cycles=self.cycles, patience=self.lr_patience, factor=self.lr_factor,
                min_lr=self.min_lr, verbose=bool(self.verbose),
            )
        except TrainingDivergenceError as exc:
            self.history_ = exc.result.history
            self.best_epoch_ = exc.result.best_epoch
            exc.estimator = self  # best weights already restored; lets callers checkpoint them
            raise
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    @staticmethod
    def _predict_tensor(module: PinnNets, X: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return module(X)[1].numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "module_")
        return self._predict_tensor(self.module_, torch.as_tensor(check_points(X)))

    def predict_price(self, X) -> np.ndarray:
        """Price-network output converted back to currency."""
        check_is_fitted(self, "module_")
        with torch.no_grad():
            c = self.module_(torch.as_tensor(check_points(X)))[0].numpy()
        return c * self.spot_scale_

    def score(self, X, y, sample_weight=None) -> float:
        return -mape(self.predict(X), np.asarray(y, dtype=np.float64).reshape(-1))

    def _fitted_meta(self) -> dict:
        return {"spot_scale_": self.spot_scale_, "best_epoch_": self.best_epoch_}

    def _restore(self, meta: dict, state: Dict[str, torch.Tensor]) -> None:
        self.spot_scale_ = meta["spot_scale_"]
        self.best_epoch_ = meta["best_epoch_"]
        self.module_ = PinnNets(self.hidden_units, self.spot_scale_)
        self.module_.load_state_dict(state)
        self.history_ = []


ESTIMATORS = {
    "pinn": PINNVolatilityRegressor,
    "convlstm": ConvLSTMForecaster,
    "sa_convlstm": SAConvLSTMForecaster,
    "convtf": ConvTFForecaster,
    "piconvtf": PIConvTFForecaster,
}
