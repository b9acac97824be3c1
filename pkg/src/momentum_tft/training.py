"""Sharpe-loss training, early stopping and the expanding-window driver."""

from __future__ import annotations

import copy
import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .features import CPD_COLUMNS, FeatureFrame, base_feature_names
from .market_data import RangeError, WalkForwardSplit, split_train_validation
from .model import (ModelInput, NumericError, TFTConfig, init_lstm_params, init_tft_params,
                    lstm_dmn_forward, save_checkpoint, tft_forward, tft_select,
                    tft_temporal)
from .tensor import Tensor

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
SHARPE_EPS = 1e-9
MODEL_KINDS = ("tft", "tft_cpd", "lstm_cpd", "long_only", "momentum")
NEURAL_KINDS = ("tft", "tft_cpd", "lstm_cpd")
PREDICT_BATCH = 64
SELECT_CHUNK = 128


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    vol_target: float = 0.15
    seed: int = 0
    transaction_cost_bp: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.vol_target <= 0:
            raise ValueError("vol_target must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class TrainedModel:
    params: dict
    model_kind: str
    config: TFTConfig
    train_config: TrainConfig
    train_loss: list[float] = field(default_factory=list)
    val_sharpe: list[float] = field(default_factory=list)
    chosen_epoch: int = 0


# returns and loss

def daily_vol_target(vol_target: float) -> float:
    return vol_target / math.sqrt(TRADING_DAYS)


def strategy_returns(positions, next_returns, vol, vol_target: float = 0.15, cost_bp: float = 0.0,
                     prev_positions=None) -> np.ndarray:
    """Vol-scaled captured returns averaged across assets.

    All inputs are (n_times, n_assets).  The captured return for asset i at
    time t is ``x_t * (target/sigma_t) * r_{t+1}`` minus a proportional cost
    on ``|x_t - x_{t-1}|`` scaled the same way.  ``prev_positions`` gives
    x_{-1} per asset (default 0).
    """
    x = np.asarray(positions, dtype=np.float64)
    r = np.asarray(next_returns, dtype=np.float64)
    s = np.asarray(vol, dtype=np.float64)
    if x.shape != r.shape or x.shape != s.shape:
        raise tc.DimensionError("strategy_returns", x.shape, r.shape, s.shape)
    if x.ndim == 1:
        x, r, s = x[:, None], r[:, None], s[:, None]
    lev = daily_vol_target(vol_target) / s
    captured = x * lev * r
    if cost_bp:
        prev = np.zeros(x.shape[1]) if prev_positions is None else np.asarray(prev_positions, dtype=np.float64)
        turnover = np.abs(np.diff(x, axis=0, prepend=prev[None, :]))
        captured = captured - cost_bp * 1e-4 * lev * turnover
    return captured.mean(axis=1)


def captured_returns(positions: Tensor, next_returns, vol, vol_target: float, cost_bp: float = 0.0) -> Tensor:
    """Differentiable per-(window, t) captured returns for training batches."""
    lev = daily_vol_target(vol_target) / np.asarray(vol, dtype=np.float64)
    out = tc.mul(positions, lev * np.asarray(next_returns, dtype=np.float64))
    if cost_bp:
        turnover = tc.abs_(tc.sub(tc.slice_(positions, (slice(None), slice(1, None))),
                                  tc.slice_(positions, (slice(None), slice(None, -1)))))
        cost = tc.mul(turnover, cost_bp * 1e-4 * lev[:, 1:])
        out = tc.sub(tc.slice_(out, (slice(None), slice(1, None))), cost)
    return out


def sharpe_loss(returns, eps: float = SHARPE_EPS) -> Tensor:
    """-sqrt(252) * mean / sqrt(population variance + eps) over every element."""
    returns = tc.as_tensor(returns)
    if returns.size < 2:
        raise ValueError("sharpe_loss needs at least two returns")
    m = tc.mean(returns)
    centered = tc.sub(returns, m)
    var = tc.mean(tc.mul(centered, centered))
    return tc.mul(tc.div(m, tc.sqrt(tc.add(var, eps))), -math.sqrt(TRADING_DAYS))


def sharpe_value(returns, eps: float = SHARPE_EPS) -> float:
    r = np.asarray(returns, dtype=np.float64).reshape(-1)
    return float(math.sqrt(TRADING_DAYS) * r.mean() / math.sqrt(r.var() + eps))


# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh parameter tensors and state."""
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise tc.DimensionError("adam_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = Tensor(p.data - learning_rate * m_hat / (np.sqrt(v_hat) + eps),
                                  requires_grad=True, name=name)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


# data plumbing

def model_feature_names(frame: FeatureFrame, model_kind: str) -> list[str]:
    names = base_feature_names()
    if model_kind in ("tft_cpd", "lstm_cpd"):
        if not frame.has_cpd:
            raise ValueError(f"{model_kind} needs changepoint features in the frame")
        names = names + list(CPD_COLUMNS)
    return names


def make_config(frame: FeatureFrame, model_kind: str, window: int = 252, n_heads: int = 4,
                d_hidden: int = 32, dropout_rate: float = 0.1, seed: int = 0) -> TFTConfig:
    names = model_feature_names(frame, model_kind)
    return TFTConfig(window=window, n_heads=n_heads, d_hidden=d_hidden, n_features=len(names),
                     dropout_rate=dropout_rate, use_cpd_features=model_kind != "tft" and "cp_score" in names,
                     seed=seed)


def init_params(model_kind: str, cfg: TFTConfig, seed: int | None = None):
    if model_kind == "lstm_cpd":
        return init_lstm_params(cfg, seed)
    return init_tft_params(cfg, seed)


def forward_fn(model_kind: str) -> Callable:
    return lstm_dmn_forward if model_kind == "lstm_cpd" else tft_forward


@dataclass
class SplitData:
    """Index bookkeeping for one walk-forward split inside a FeatureFrame."""

    n_train: int  # frame rows before the test year
    val_start: int  # first validation row
    test_idx: np.ndarray  # frame rows inside the test year

    @property
    def train_loss_end(self) -> int:
        return self.val_start


def split_data(frame: FeatureFrame, split: WalkForwardSplit) -> SplitData:
    boundary = np.datetime64(split.test_start, "D")
    n_train = int(np.searchsorted(frame.dates, boundary))
    end = np.datetime64(split.test_end, "D")
    test_idx = np.nonzero((frame.dates >= boundary) & (frame.dates <= end))[0]
    if n_train < 2:
        raise RangeError(f"no training rows before {split.test_start}")
    return SplitData(n_train, split_train_validation(n_train, split.validation_fraction), test_idx)


def training_windows(n_rows: int, window: int, rng: np.random.Generator) -> list[int]:
    """Non-overlapping window starts tiling ``[0, n_rows)`` from a random offset.

    The target of row t is the return at t+1, so the last row of the range
    is never a loss position: the usable range is ``n_rows - 1`` rows.
    """
    usable = n_rows - 1
    if usable < window:
        raise RangeError(f"training range of {n_rows} rows is shorter than window + 1 = {window + 1}")
    count = usable // window
    offset = int(rng.integers(0, usable - count * window + 1))
    return [offset + k * window for k in range(count)]


def _gather(frame: FeatureFrame, names, starts_assets, window):
    cols = [frame.feature_names.index(n) for n in names]
    u = np.stack([frame.values[s:s + window, a][:, cols] for s, a in starts_assets])
    r = np.stack([frame.next_return[s:s + window, a] for s, a in starts_assets])
    v = np.stack([frame.ewma_vol[s:s + window, a] for s, a in starts_assets])
    sec = np.array([frame.sector_index[a] for _, a in starts_assets], dtype=np.int64)
    return u, r, v, sec


def _validation_windows(val_start: int, val_end: int, window: int) -> list[tuple[int, int, int]]:
    """(window start, first scored offset, n scored) covering validation rows
    ``[val_start, val_end)``; inputs may reach back into training rows."""
    out = []
    end = val_end
    while end > val_start:
        first = max(val_start, end - window)
        start = max(0, end - window)
        out.append((start, first - start, end - first))
        end = first
    return out[::-1]


def validation_sharpe(frame: FeatureFrame, names, params, cfg: TFTConfig, model_kind: str,
                      data: SplitData, tcfg: TrainConfig) -> float:
    """Sharpe of the equal-weight portfolio over the validation rows."""
    val_end = data.n_train - 1  # the last training row's target lies in the test year
    if val_end - data.val_start < 2:
        return 0.0
    fwd = forward_fn(model_kind)
    pos = np.empty((val_end - data.val_start, frame.n_assets))
    with tc.no_grad():
        for start, first, count in _validation_windows(data.val_start, val_end, cfg.window):
            if start + cfg.window > data.n_train:
                raise RangeError("validation window exceeds training range")
            idx = [(start, a) for a in range(frame.n_assets)]
            u, _, _, sec = _gather(frame, names, idx, cfg.window)
            x = fwd(ModelInput(u, sec), params, cfg).x
            lo = start + first - data.val_start
            pos[lo:lo + count] = x[:, first:first + count].T
    rows = slice(data.val_start, val_end)
    port = strategy_returns(pos, frame.next_return[rows], frame.ewma_vol[rows], tcfg.vol_target,
                            tcfg.transaction_cost_bp)
    return sharpe_value(port)


def _batch_loss(frame, names, batch, params, cfg, model_kind, tcfg, rng, train_mode=True):
    u, r, v, sec = _gather(frame, names, batch, cfg.window)
    out = forward_fn(model_kind)(ModelInput(u, sec), params, cfg, train_mode=train_mode, rng=rng)
    return sharpe_loss(captured_returns(out.positions, r, v, tcfg.vol_target, tcfg.transaction_cost_bp))


def training_loss(frame, split, params, cfg, model_kind, tcfg, seed=0) -> float:
    """Evaluation-mode loss over a fixed tiling of the training rows."""
    data = split_data(frame, split)
    names = model_feature_names(frame, model_kind)
    starts = training_windows(data.train_loss_end, cfg.window, np.random.default_rng(seed))
    batch = [(s, a) for s in starts for a in range(frame.n_assets)]
    with tc.no_grad():
        return _batch_loss(frame, names, batch, params, cfg, model_kind, tcfg, None, False).item()


def train(frame: FeatureFrame, split: WalkForwardSplit, model_kind: str, cfg: TFTConfig,
          tcfg: TrainConfig, init=None, on_epoch: Callable | None = None) -> TrainedModel:
    """Fit on the split's training rows, keeping the best-validation epoch.

    Loss positions come only from the first (1 - validation_fraction) of the
    training rows; validation Sharpe is measured on the rest.
    """
    if model_kind not in NEURAL_KINDS:
        raise ValueError(f"{model_kind} is not trainable")
    data = split_data(frame, split)
    if data.n_train < cfg.window + 1:
        raise RangeError(f"split {split.test_year}: {data.n_train} training rows < window + 1")
    names = model_feature_names(frame, model_kind)
    if len(names) != cfg.n_features:
        raise ValueError(f"config expects {cfg.n_features} features, frame provides {len(names)}")
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, split.test_year]))
    params = init if init is not None else init_params(model_kind, cfg, cfg.seed)
    state = AdamState()
    result = TrainedModel(params, model_kind, cfg, tcfg)
    best = -np.inf
    best_params = params
    since_best = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        starts = training_windows(data.train_loss_end, cfg.window, rng)
        windows = [(s, a) for s in starts for a in range(frame.n_assets)]
        order = rng.permutation(len(windows))
        losses = []
        for b in range(0, len(windows), tcfg.batch_size):
            batch = [windows[i] for i in order[b:b + tcfg.batch_size]]
            tc.active_tape().clear()
            loss = _batch_loss(frame, names, batch, params, cfg, model_kind, tcfg, rng)
            tc.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            params, state = adam_step(params, grads, state, tcfg.learning_rate)
            losses.append(loss.item())
        score = validation_sharpe(frame, names, params, cfg, model_kind, data, tcfg)
        result.train_loss.append(float(np.mean(losses)))
        result.val_sharpe.append(score)
        if on_epoch is not None:
            on_epoch(epoch, result.train_loss[-1], score)
        logger.debug("split %s epoch %d loss %.4f val sharpe %.3f", split.test_year, epoch,
                     result.train_loss[-1], score)
        if score > best or epoch == 1:
            best, best_params, result.chosen_epoch = score, params, epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= tcfg.early_stop_patience:
                break
    result.params = best_params
    return result


# prediction

def predict_last(frame: FeatureFrame, names, rows: Sequence[int], params, cfg: TFTConfig,
                 model_kind: str) -> np.ndarray:
    """Position at each row from the trailing window ending there.

    Batches are always padded to ``PREDICT_BATCH`` windows so every window
    goes through identically shaped kernels, whatever else shares its batch.
    """
    rows = list(rows)
    if rows and min(rows) < cfg.window - 1:
        raise RangeError(f"row {min(rows)} has fewer than {cfg.window} rows of history")
    if model_kind != "lstm_cpd" and rows:
        return _predict_last_tft(frame, names, rows, params, cfg)
    fwd = forward_fn(model_kind)
    tasks = [(r - cfg.window + 1, a) for r in rows for a in range(frame.n_assets)]
    out = np.empty(len(tasks))
    with tc.no_grad():
        for b in range(0, len(tasks), PREDICT_BATCH):
            chunk = tasks[b:b + PREDICT_BATCH]
            pad = chunk + [chunk[-1]] * (PREDICT_BATCH - len(chunk))
            u, _, _, sec = _gather(frame, names, pad, cfg.window)
            x = fwd(ModelInput(u, sec), params, cfg, last_only=True).x
            out[b:b + len(chunk)] = x[:len(chunk), -1]
    return out.reshape(len(rows), frame.n_assets)


def _predict_last_tft(frame: FeatureFrame, names, rows: list[int], params, cfg: TFTConfig) -> np.ndarray:
    """TFT variant of :func:`predict_last` that runs variable selection once per date.

    Selection is per timestep, so it is computed for every needed row in
    fixed-size chunks anchored at the first window start, then sliced into
    the overlapping windows fed to the sequence layers.
    """
    lo = min(rows) - cfg.window + 1
    hi = max(rows) + 1
    cols = [frame.feature_names.index(n) for n in names]
    n_chunks = -(-(hi - lo) // SELECT_CHUNK)
    selected = np.empty((frame.n_assets, n_chunks * SELECT_CHUNK, cfg.d_hidden))
    with tc.no_grad():
        for a in range(frame.n_assets):
            sec = frame.sector_index[a:a + 1]
            for c in range(n_chunks):
                start = lo + c * SELECT_CHUNK
                block = frame.values[start:min(start + SELECT_CHUNK, hi), a][:, cols]
                u = np.zeros((1, SELECT_CHUNK, len(cols)))
                u[0, :len(block)] = block
                sel, _, _ = tft_select(u, sec, params, cfg)
                selected[a, c * SELECT_CHUNK:(c + 1) * SELECT_CHUNK] = sel.data[0]
        ctx = {}
        for s in np.unique(frame.sector_index):
            ctx[int(s)] = tft_select(np.zeros((1, 1, len(cols))), np.array([s]), params, cfg)[2].data[0]
        tasks = [(r - cfg.window + 1 - lo, a) for r in rows for a in range(frame.n_assets)]
        out = np.empty(len(tasks))
        for b in range(0, len(tasks), PREDICT_BATCH):
            chunk = tasks[b:b + PREDICT_BATCH]
            pad = chunk + [chunk[-1]] * (PREDICT_BATCH - len(chunk))
            seq = np.stack([selected[a, s:s + cfg.window] for s, a in pad])
            enrich = np.stack([ctx[int(frame.sector_index[a])] for _, a in pad])
            x, _ = tft_temporal(Tensor(seq), Tensor(enrich), params, cfg, last_only=True)
            out[b:b + len(chunk)] = x.data[:len(chunk), -1]
    return out.reshape(len(rows), frame.n_assets)


@dataclass
class WalkForwardResult:
    model_kind: str
    dates: np.ndarray
    asset_ids: list[str]
    positions: np.ndarray  # (n_test_dates, n_assets)
    models: list = field(default_factory=list)
    split_years: list = field(default_factory=list)


def walk_forward(frame: FeatureFrame, splits: Sequence[WalkForwardSplit], model_kind: str,
                 cfg: TFTConfig | None = None, tcfg: TrainConfig | None = None,
                 checkpoint_dir=None, tag: str | None = None) -> WalkForwardResult:
    """Train one model per split and predict its test year one day at a time."""
    from .metrics import baseline_positions

    tcfg = tcfg or TrainConfig()
    all_dates, all_pos, models, years = [], [], [], []
    for split in splits:
        data = split_data(frame, split)
        if model_kind in ("long_only", "momentum"):
            pos = baseline_positions(model_kind, frame)[data.test_idx]
        else:
            names = model_feature_names(frame, model_kind)
            trained = train(frame, split, model_kind, cfg, tcfg)
            models.append(trained)
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"{tag or model_kind}_split_{split.test_year}.npz"
                save_checkpoint(path, trained.params, cfg, model_kind,
                                {"test_year": split.test_year, "chosen_epoch": trained.chosen_epoch,
                                 "val_sharpe": trained.val_sharpe, "train_loss": trained.train_loss})
            pos = predict_last(frame, names, data.test_idx, trained.params, cfg, model_kind)
        all_dates.append(frame.dates[data.test_idx])
        all_pos.append(pos)
        years.append(split.test_year)
    return WalkForwardResult(model_kind, np.concatenate(all_dates), list(frame.asset_ids),
                             np.concatenate(all_pos), models, years)


def write_positions_csv(result: WalkForwardResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset_id", "date", "position"])
        for j, a in enumerate(result.asset_ids):
            for i, d in enumerate(result.dates):
                w.writerow([a, str(d), repr(float(result.positions[i, j]))])


def read_positions_csv(path) -> tuple[np.ndarray, list[str], np.ndarray]:
    rows: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for a, d, x in reader:
            rows.setdefault(a, []).append((d, float(x)))
    ids = list(rows)
    dates = np.array([d for d, _ in rows[ids[0]]], dtype="datetime64[D]")
    pos = np.array([[x for _, x in rows[a]] for a in ids]).T
    return dates, ids, pos
