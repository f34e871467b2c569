"""Training loop with plateau LR halving and best-validation selection; metrics; splits."""
from __future__ import annotations

import copy
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .exceptions import CoverageError, ShapeError, TrainingDivergenceError
from .piconvtf import eval_call_grid
from .surface_data import DatasetSplit, VolSurfaceGrid, parse_date, split_with_validation

logger = logging.getLogger(__name__)

CALL_PERCENTILE = 20.0

MAIN_SPLIT = (("2004-01-05", "2019-12-31"), ("2020-01-01", "2021-08-13"))
REGIME_SPLITS = {
    "subprime": (("2004-01-05", "2008-09-25"), ("2008-09-26", "2009-05-11")),
    "covid": (("2009-05-12", "2020-03-04"), ("2020-03-05", "2020-04-21")),
}


# --- metrics -------------------------------------------------------------------------


def mape(pred, truth, return_excluded: bool = False):
    """Mean absolute percentage error in percent; cells with zero truth are skipped."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    keep = truth != 0
    excluded = int(keep.size - keep.sum())
    value = 100.0 * float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep]))) if keep.any() else 0.0
    return (value, excluded) if return_excluded else value


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def call_price_filtered_mape(sigma_pred, sigma_true, market, return_count: bool = False):
    """Call-price MAPE over cells whose true price lies above the day's 20th percentile."""
    with torch.no_grad():
        c_pred = eval_call_grid(torch.as_tensor(np.asarray(sigma_pred, dtype=np.float64)), market).numpy()
        c_true = eval_call_grid(torch.as_tensor(np.asarray(sigma_true, dtype=np.float64)), market).numpy()
    threshold = nearest_rank_percentile(c_true, CALL_PERCENTILE)
    keep = c_true > threshold
    value = mape(c_pred[keep], c_true[keep])
    return (value, int(keep.sum())) if return_count else value


# --- LR schedule and training loop ------------------------------------------------------


class PlateauHalving:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: torch.optim.Optimizer, patience: int = 5, factor: float = 0.5,
                 min_lr: float = 1e-6):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] = max(group["lr"] * self.factor, self.min_lr)
            self.bad_epochs = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainingResult:
    best_state: Dict[str, torch.Tensor]
    best_epoch: int
    history: List[EpochRecord] = field(default_factory=list)


def train_model(
    module: torch.nn.Module,
    train_tensors: Sequence[torch.Tensor],
    loss_fn: Callable[..., torch.Tensor],
    val_metric: Callable[[torch.nn.Module], float],
    epochs: int,
    batch_size: int,
    learning_rate: float,
    generator: torch.Generator,
    cycles: int = 1,
    patience: int = 5,
    factor: float = 0.5,
    min_lr: float = 1e-6,
    verbose: bool = False,
) -> TrainingResult:
    """Mini-batch Adam over ``train_tensors`` (first dim = samples).

    ``loss_fn(module, *batch)`` returns the scalar training loss; ``val_metric(module)``
    returns the validation loss used for both LR scheduling and checkpoint
    selection. With ``cycles > 1`` the epochs are split evenly and each cycle
    restarts the optimizer and schedule from the best weights so far. A non-finite
    training loss restores the best weights and raises
    :class:`TrainingDivergenceError` carrying the partial result.
    """
    n = train_tensors[0].shape[0]
    if n == 0:
        raise ShapeError("empty training set")
    per_cycle = [epochs // cycles + (1 if c < epochs % cycles else 0) for c in range(cycles)]
    result = TrainingResult(copy.deepcopy(module.state_dict()), 0)
    best_val = math.inf
    epoch = 0
    for cycle_epochs in per_cycle:
        if epoch > 0:
            module.load_state_dict(result.best_state)
        optimizer = torch.optim.Adam(module.parameters(), lr=learning_rate)
        schedule = PlateauHalving(optimizer, patience, factor, min_lr)
        for _ in range(cycle_epochs):
            epoch += 1
            module.train()
            order = torch.randperm(n, generator=generator)
            total, count = 0.0, 0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                optimizer.zero_grad()
                loss = loss_fn(module, *(t[idx] for t in train_tensors))
                if not torch.isfinite(loss):
                    module.load_state_dict(result.best_state)
                    err = TrainingDivergenceError(f"non-finite training loss at epoch {epoch}")
                    err.result = result
                    raise err
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            module.eval()
            val = float(val_metric(module))
            lr_used = schedule.lr
            schedule.step(val)
            result.history.append(EpochRecord(epoch, total / count, val, lr_used))
            if val < best_val:
                best_val = val
                result.best_epoch = epoch
                result.best_state = copy.deepcopy(module.state_dict())
            if verbose:
                logger.info("epoch %d train %.6g val %.6g lr %.3g", epoch, total / count, val, lr_used)
    module.load_state_dict(result.best_state)
    return result


# --- splits --------------------------------------------------------------------------


def _check_coverage(dates: Sequence[dt.date], start: dt.date, end: dt.date, label: str) -> None:
    if not dates or dates[0] > start or dates[-1] < end:
        span = f"{dates[0]}..{dates[-1]}" if dates else "empty series"
        raise CoverageError(f"series ({span}) does not cover {label} range {start}..{end}")


def make_split(series: Sequence[VolSurfaceGrid], train, test, validation_fraction: float = 0.2,
               label: str = "split") -> DatasetSplit:
    dates = [g.date for g in series]
    train = (parse_date(train[0]), parse_date(train[1]))
    test = (parse_date(test[0]), parse_date(test[1]))
    _check_coverage(dates, train[0], test[1], label)
    return split_with_validation(dates, train, test, validation_fraction)


@dataclass
class RegimeSplits:
    splits: Dict[str, DatasetSplit]
    vol_threshold: float
    high_vol_dates: List[dt.date]


def high_vol_threshold(series: Sequence[VolSurfaceGrid], q: float = 95.0) -> Tuple[float, List[dt.date]]:
    """Percentile of all vol values across days and cells, and the days whose mean exceeds it."""
    allv = np.concatenate([g.values.reshape(-1) for g in series])
    threshold = float(np.percentile(allv, q))
    return threshold, [g.date for g in series if g.values.mean() > threshold]


def regime_splits(
    series: Sequence[VolSurfaceGrid],
    ranges: Optional[Dict[str, Tuple[Tuple, Tuple]]] = None,
    validation_fraction: float = 0.2,
) -> RegimeSplits:
    """Main split plus the stress-regime splits, each with a trailing validation carve-out."""
    if ranges is None:
        ranges = {"main": MAIN_SPLIT, **REGIME_SPLITS}
    splits = {
        name: make_split(series, train, test, validation_fraction, label=name)
        for name, (train, test) in ranges.items()
    }
    threshold, dates = high_vol_threshold(series)
    return RegimeSplits(splits, threshold, dates)
