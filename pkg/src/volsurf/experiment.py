"""Experiment plumbing: flat config files, data preparation, training, daily metrics and reports."""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import save_checkpoint
from .estimators import (
    ConvLSTMForecaster,
    ConvTFForecaster,
    PersistenceForecaster,
    PIConvTFForecaster,
    PINNVolatilityRegressor,
    SAConvLSTMForecaster,
)
from .exceptions import ConfigError, DataError, TrainingDivergenceError
from .piconvtf import DERIVATIVE_MODES
from .surface_data import (
    DatasetSplit,
    Shock,
    SyntheticConfig,
    VolSurfaceGrid,
    WindowedDataset,
    build_dataset,
    load_series,
    parse_date,
    samples_to_arrays,
    synthetic_series,
)
from .train_eval import MAIN_SPLIT, call_price_filtered_mape, make_split, mape

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "VOLSURF_OUTPUT_DIR"
MODEL_KINDS = ("pinn", "convlstm", "sa_convlstm", "convtf", "piconvtf")
BASELINE = "persistence"

# (epochs, batch size, initial learning rate) per model
DEFAULT_TRAINING = {
    "pinn": (2000, 256, 0.1),
    "convlstm": (100, 32, 1e-3),
    "sa_convlstm": (100, 32, 1e-3),
    "convtf": (100, 16, 1e-3),
    "piconvtf": (100, 16, 1e-3),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; ``None`` training fields fall back to per-model defaults."""

    model: str = "piconvtf"
    models: str = ",".join(MODEL_KINDS)
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    learning_rate: Optional[float] = None
    window: int = 10
    recurrent_hidden: int = 64
    kernel_size: int = 3
    recurrent_layers: int = 1
    qk_channels: int = 8
    convtf_hidden: int = 32
    heads: int = 4
    convtf_layers: int = 1
    sffn_peak: int = 128
    convtf_head: str = "sffn"
    pinn_hidden_units: int = 10000
    pinn_cycles: int = 2
    lam: float = 0.1
    derivative_mode: str = "pointwise_analytic"
    augmented_input: Optional[bool] = None
    train_start: str = MAIN_SPLIT[0][0]
    train_end: str = MAIN_SPLIT[0][1]
    test_start: str = MAIN_SPLIT[1][0]
    test_end: str = MAIN_SPLIT[1][1]
    validation_fraction: float = 0.2
    lr_patience: int = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0
    data_path: Optional[str] = None
    synthetic_days: int = 4600
    synthetic_start: str = "2004-01-05"
    synthetic_base_level: float = 0.2
    synthetic_curvature: float = 0.8
    synthetic_term_slope: float = 0.03
    synthetic_mean_reversion: float = 0.1
    synthetic_vol_of_vol: float = 0.005
    synthetic_curvature_drift: float = 0.0
    synthetic_slope_drift: float = 0.0
    synthetic_obs_noise: float = 0.0
    synthetic_shocks: str = ""  # "start:length:size;..."
    synthetic_spot0: float = 100.0
    synthetic_rate: float = 0.02
    output_dir: str = "results"
    plots: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        for kind in self.model_list:
            if kind not in MODEL_KINDS:
                raise ConfigError(f"unknown model {kind!r} in models list")
        if self.derivative_mode not in DERIVATIVE_MODES:
            raise ConfigError(f"derivative_mode must be one of {DERIVATIVE_MODES}")
        if self.convtf_head not in ("sffn", "conv"):
            raise ConfigError("convtf_head must be 'sffn' or 'conv'")
        for name in ("epochs", "batch_size", "window", "synthetic_days", "pinn_cycles"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        for name in ("train_start", "train_end", "test_start", "test_end", "synthetic_start"):
            try:
                parse_date(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        self.shocks()

    @property
    def model_list(self) -> List[str]:
        return [k.strip() for k in self.models.split(",") if k.strip()]

    def training(self, kind: str) -> Tuple[int, int, float]:
        epochs, batch, lr = DEFAULT_TRAINING[kind]
        return (
            self.epochs if self.epochs is not None else epochs,
            self.batch_size if self.batch_size is not None else batch,
            self.learning_rate if self.learning_rate is not None else lr,
        )

    def augmented_for(self, kind: str) -> bool:
        if kind == "pinn":
            return False
        if kind == "piconvtf":
            return True if self.augmented_input is None else bool(self.augmented_input)
        return bool(self.augmented_input)

    def shocks(self) -> Tuple[Shock, ...]:
        out = []
        for chunk in filter(None, (c.strip() for c in self.synthetic_shocks.split(";"))):
            try:
                start, length, size = chunk.split(":")
                out.append(Shock(int(start), int(length), float(size)))
            except ValueError as exc:
                raise ConfigError(f"bad shock spec {chunk!r}; expected start:length:size") from exc
        return tuple(out)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            days=self.synthetic_days,
            start_date=parse_date(self.synthetic_start),
            base_level=self.synthetic_base_level,
            curvature=self.synthetic_curvature,
            term_slope=self.synthetic_term_slope,
            mean_reversion=self.synthetic_mean_reversion,
            vol_of_vol=self.synthetic_vol_of_vol,
            curvature_drift=self.synthetic_curvature_drift,
            slope_drift=self.synthetic_slope_drift,
            obs_noise=self.synthetic_obs_noise,
            shocks=self.shocks(),
            spot0=self.synthetic_spot0,
            rate=self.synthetic_rate,
        )


# --- flat key = value config files ---------------------------------------------------------


def _convert(name: str, raw: str, hint):
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    if optional:
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines ('#' starts a comment). Unknown keys are rejected."""
    hints = typing.get_type_hints(ExperimentConfig)
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _convert(key, raw, hints[key])
    return ExperimentConfig(**values)


def apply_overrides(config: ExperimentConfig, pairs: Sequence[str]) -> ExperimentConfig:
    """Replace fields from ``key=value`` strings, with the same typing and key checks as files."""
    hints = typing.get_type_hints(ExperimentConfig)
    changes = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = (s.strip() for s in pair.split("=", 1))
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _convert(key, raw, hints[key])
    return dataclasses.replace(config, **changes)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def resolve_output_dir(config: ExperimentConfig, override=None) -> Path:
    """Explicit argument, then the environment override, then the config value."""
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_DIR_ENV)
    return Path(env) if env else Path(config.output_dir)


# --- data --------------------------------------------------------------------------------


@dataclass
class PreparedData:
    series: List[VolSurfaceGrid]
    split: DatasetSplit
    dataset: WindowedDataset
    spot_ref: float
    _arrays: Dict[bool, dict] = field(default_factory=dict, repr=False)

    def arrays(self, augmented: bool) -> dict:
        """``{'train'|'validation'|'test': (X, y, market)}`` for the chosen input layout."""
        if augmented not in self._arrays:
            self._arrays[augmented] = {
                name: samples_to_arrays(getattr(self.dataset, name), augmented, self.spot_ref)
                for name in ("train", "validation", "test")
            }
        return self._arrays[augmented]

    def grids(self, name: str) -> List[VolSurfaceGrid]:
        start, end = getattr(self.split, name)
        return [g for g in self.series if start <= g.date <= end]

    @property
    def test_dates(self) -> List[dt.date]:
        return [s.target.date for s in self.dataset.test]


def load_data(config: ExperimentConfig) -> List[VolSurfaceGrid]:
    if config.data_path:
        try:
            return load_series(config.data_path)
        except OSError as exc:
            raise DataError(f"cannot read series {config.data_path}: {exc}") from exc
    return synthetic_series(config.synthetic_config(), seed=config.seed)


def prepare_data(config: ExperimentConfig, series: Optional[List[VolSurfaceGrid]] = None) -> PreparedData:
    series = load_data(config) if series is None else series
    split = make_split(
        series, (config.train_start, config.train_end), (config.test_start, config.test_end),
        config.validation_fraction, label="experiment",
    )
    dataset = build_dataset(series, split, config.window)
    for name in ("train", "validation", "test"):
        if not getattr(dataset, name):
            raise DataError(f"{name} split yields no samples: {'; '.join(dataset.warnings)}")
    first_train = next(g for g in series if g.date >= split.train[0])
    return PreparedData(series, split, dataset, first_train.spot)


def grid_points(grids: Sequence[VolSurfaceGrid]) -> Tuple[np.ndarray, np.ndarray]:
    """PINN rows (S, tau, m, r) and vol targets for every cell of every grid."""
    rows, targets = [], []
    for g in grids:
        m, tau = g.axes.mesh()
        rows.append(np.stack([np.full(m.size, g.spot), tau.ravel(), m.ravel(), np.full(m.size, g.rate)], axis=1))
        targets.append(g.values.ravel())
    return np.concatenate(rows), np.concatenate(targets)


# --- training and evaluation ---------------------------------------------------------------


def build_estimator(config: ExperimentConfig, kind: str):
    epochs, batch, lr = config.training(kind)
    common = dict(
        epochs=epochs, batch_size=batch, learning_rate=lr, lr_patience=config.lr_patience,
        lr_factor=config.lr_factor, min_lr=config.min_lr,
        validation_fraction=config.validation_fraction, random_state=config.seed,
    )
    if kind == "pinn":
        return PINNVolatilityRegressor(hidden_units=config.pinn_hidden_units, cycles=config.pinn_cycles, **common)
    if kind in ("convlstm", "sa_convlstm"):
        rec = dict(hidden_channels=config.recurrent_hidden, kernel_size=config.kernel_size,
                   num_layers=config.recurrent_layers)
        if kind == "convlstm":
            return ConvLSTMForecaster(**rec, **common)
        return SAConvLSTMForecaster(**rec, qk_channels=config.qk_channels, **common)
    tf = dict(hidden_channels=config.convtf_hidden, heads=config.heads, num_layers=config.convtf_layers,
              sffn_peak=config.sffn_peak, head=config.convtf_head)
    if kind == "convtf":
        return ConvTFForecaster(**tf, **common)
    if kind == "piconvtf":
        return PIConvTFForecaster(**tf, lam=config.lam, derivative_mode=config.derivative_mode, **common)
    raise ConfigError(f"unknown model kind {kind!r}")


def fit_estimator(config: ExperimentConfig, kind: str, data: PreparedData):
    """Fit one model on the prepared split; validation is the split's own validation range."""
    est = build_estimator(config, kind)
    if kind == "pinn":
        X, y = grid_points(data.grids("train"))
        est.fit(X, y, eval_set=grid_points(data.grids("validation")))
        return est
    arrays = data.arrays(config.augmented_for(kind))
    X, y, market = arrays["train"]
    Xv, yv, _ = arrays["validation"]
    if kind == "piconvtf":
        est.fit(X, y, market=market, eval_set=(Xv, yv))
    else:
        est.fit(X, y, eval_set=(Xv, yv))
    return est


def predict_test(config: ExperimentConfig, kind: str, estimator, data: PreparedData) -> np.ndarray:
    if kind == "pinn":
        X, _ = grid_points([s.target for s in data.dataset.test])
        shape = data.series[0].axes.shape
        return estimator.predict(X).reshape(-1, *shape)
    if kind == BASELINE:
        return PersistenceForecaster().fit(data.arrays(False)["test"][0]).predict(data.arrays(False)["test"][0])
    return estimator.predict(data.arrays(config.augmented_for(kind))["test"][0])


@dataclass(frozen=True)
class DailyMetrics:
    date: dt.date
    vol_mape_pct: float
    call_mape_pct: float


def daily_metrics(pred: np.ndarray, data: PreparedData) -> List[DailyMetrics]:
    _, y, market = data.arrays(False)["test"]
    out = []
    for date, p, t, mk in zip(data.test_dates, pred, y, market):
        out.append(DailyMetrics(date, mape(p, t), call_price_filtered_mape(p, t, mk)))
    return out


def summarize(rows: Sequence[DailyMetrics]) -> Tuple[float, float]:
    return (float(np.mean([r.vol_mape_pct for r in rows])), float(np.mean([r.call_mape_pct for r in rows])))


# --- files -------------------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _open_for_write(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_daily_csv(path, rows: Sequence[DailyMetrics]) -> None:
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "vol_mape_pct", "call_mape_pct"])
        for r in rows:
            w.writerow([r.date.isoformat(), _fmt(r.vol_mape_pct), _fmt(r.call_mape_pct)])


def read_daily_csv(path) -> List[DailyMetrics]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            return [
                DailyMetrics(parse_date(r["date"]), float(r["vol_mape_pct"]), float(r["call_mape_pct"]))
                for r in reader
            ]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed metrics CSV ({exc})") from exc


def write_summary_csv(path, summary: Dict[str, Tuple[float, float]]) -> None:
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "vol_mape_pct", "call_mape_pct"])
        for model, (vol, call) in summary.items():
            w.writerow([model, _fmt(vol), _fmt(call)])


def write_training_log(path, history) -> None:
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mape_pct", "lr"])
        for rec in history:
            w.writerow([rec.epoch, f"{rec.train_loss:.10g}", f"{rec.val_loss:.10g}", f"{rec.lr:.10g}"])


def plot_daily(csv_paths: Dict[str, Path], out_path, column: str = "vol_mape_pct") -> Path:
    """Line plot of one daily-metric column per model, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    with matplotlib.rc_context({"svg.hashsalt": "volsurf", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(8, 4))
        for label, path in csv_paths.items():
            rows = read_daily_csv(path)
            style = "--" if label == BASELINE else "-"
            ax.plot([r.date for r in rows], [getattr(r, column) for r in rows], style, label=label)
        ax.set_xlabel("test date")
        ax.set_ylabel("MAPE (%)")
        ax.legend()
        fig.autofmt_xdate()
        try:
            out_path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out_path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise DataError(f"cannot write plot {out_path}: {exc}") from exc
        finally:
            plt.close(fig)
    return out_path


# --- drivers -----------------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    summary: Dict[str, Tuple[float, float]]
    daily: Dict[str, List[DailyMetrics]]
    output_dir: Path
    estimators: Dict[str, object] = field(default_factory=dict)


def train_and_save(config: ExperimentConfig, kind: str, data: PreparedData, out_dir: Path):
    """Fit, then write the checkpoint and training log; a divergence still leaves both behind."""
    try:
        est = fit_estimator(config, kind, data)
    except TrainingDivergenceError as exc:
        est = getattr(exc, "estimator", None)
        if est is not None:
            save_checkpoint(out_dir / f"{kind}_checkpoint.json", est)
            write_training_log(out_dir / f"{kind}_train_log.csv", est.history_)
        raise
    save_checkpoint(out_dir / f"{kind}_checkpoint.json", est)
    write_training_log(out_dir / f"{kind}_train_log.csv", est.history_)
    return est


def evaluate_estimator(config: ExperimentConfig, kind: str, estimator, data: PreparedData,
                       out_dir: Path) -> List[DailyMetrics]:
    rows = daily_metrics(predict_test(config, kind, estimator, data), data)
    write_daily_csv(out_dir / f"{kind}_daily.csv", rows)
    return rows


def _run(config: ExperimentConfig, kinds: Sequence[str], output_dir=None) -> ExperimentResult:
    out_dir = resolve_output_dir(config, output_dir)
    data = prepare_data(config)
    result = ExperimentResult({}, {}, out_dir)
    for kind in list(kinds) + [BASELINE]:
        est = None
        if kind != BASELINE:
            logger.info("training %s", kind)
            est = train_and_save(config, kind, data, out_dir)
            result.estimators[kind] = est
        rows = evaluate_estimator(config, kind, est, data, out_dir)
        result.daily[kind] = rows
        result.summary[kind] = summarize(rows)
    write_summary_csv(out_dir / "summary.csv", result.summary)
    if config.plots:
        paths = {k: out_dir / f"{k}_daily.csv" for k in result.daily}
        plot_daily(paths, out_dir / "daily_vol_mape.svg", "vol_mape_pct")
        plot_daily(paths, out_dir / "daily_call_mape.svg", "call_mape_pct")
    return result


def run_experiment(config: ExperimentConfig, output_dir=None) -> ExperimentResult:
    """Train ``config.model``, evaluate it and the persistence baseline on the test split."""
    return _run(config, [config.model], output_dir)


def run_all(config: ExperimentConfig, output_dir=None) -> ExperimentResult:
    """Every model in ``config.models`` plus the persistence baseline, one summary table."""
    return _run(config, config.model_list, output_dir)
