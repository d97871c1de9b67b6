"""Stabilized neural-ODE surrogates for slow eigenstrain evolutions.

Two data-driven strain contributions share this engine: the release of
initial (residual/drying) strain during the first heating, and the
crystallization strain that develops above the glass transition.  Both
are modeled as a scalar ODE

    d eps / dt = G(window, eps) * eps + H(window)

where G and H are small recurrent networks reading a two-sample window
of exogenous inputs (temperature change, time, simulated thermal strain)
and G's output is passed through x -> -softplus(x) so the state feedback
is never positive: rollouts damp instead of diverging, which is what
makes extrapolation beyond the training temperature range safe.

Everything runs in float64 on CPU so that training is deterministic for
a fixed seed and analytic gradients can be checked against finite
differences tightly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .core import StrainSeries

FEATURE_NAMES = ("temperature", "time", "thermal_strain")
_FORMAT_TAG = "tapesim-snode v1"


class RolloutDivergenceError(RuntimeError):
    """Rollout state exceeded the divergence guard."""


class GridMismatchError(ValueError):
    """Series supplied on different time grids."""


# ---------------------------------------------------------------------------
# targets


def build_ini_targets(eps_bar: StrainSeries, eps_sim: StrainSeries,
                      stage1_mask: np.ndarray) -> StrainSeries:
    """Initial-release target on the first heating stage.

    eps_ini(t) = eps_bar(t) - eps_sim(t), shifted so the first masked
    sample is exactly zero (the release starts from nothing).
    """
    if not np.array_equal(eps_bar.times, eps_sim.times):
        raise GridMismatchError("experimental and simulated grids differ")
    mask = np.asarray(stage1_mask, bool)
    if mask.shape != eps_bar.times.shape or not mask.any():
        raise GridMismatchError("stage-1 mask does not match the grid")
    diff = eps_bar.values - eps_sim.values
    sel = np.flatnonzero(mask)
    vals = diff[sel] - diff[sel[0]]
    return StrainSeries(eps_bar.times[sel], vals, label="eps_ini")


def build_crys_targets(eps_bar: StrainSeries, eps_sim: StrainSeries,
                       eps_ini_frozen: np.ndarray) -> StrainSeries:
    """Crystallization target: what the physics + frozen release miss.

    eps_ini_frozen must already be expanded to the full grid (constant at
    its saturation value after the first heating).
    """
    if not np.array_equal(eps_bar.times, eps_sim.times):
        raise GridMismatchError("experimental and simulated grids differ")
    eps_ini_frozen = np.asarray(eps_ini_frozen, float)
    if eps_ini_frozen.shape != eps_bar.times.shape:
        raise GridMismatchError("frozen release series does not match the grid")
    return StrainSeries(eps_bar.times,
                        eps_bar.values - eps_sim.values - eps_ini_frozen,
                        label="eps_crys")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SeriesDataset:
    """Uniformly sampled exogenous features and scalar target.

    features columns follow FEATURE_NAMES: temperature (K or delta-K
    depending on how the caller built it), time (s), simulated thermal
    strain (-).
    """

    times: np.ndarray
    features: np.ndarray   # (n, 3)
    target: np.ndarray     # (n,)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.features = np.asarray(self.features, float)
        self.target = np.asarray(self.target, float)
        if self.features.shape != (self.times.size, len(FEATURE_NAMES)):
            raise ValueError("features must be (n, 3)")
        if self.target.shape != self.times.shape:
            raise ValueError("target must match the time grid")
        steps = np.diff(self.times)
        if self.times.size < 3 or not np.allclose(steps, steps[0],
                                                  rtol=1e-8, atol=1e-12):
            raise ValueError("dataset requires a uniform time grid (>= 3 pts)")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @classmethod
    def from_series(cls, temps: np.ndarray, eps_sim: np.ndarray,
                    target: StrainSeries, temperature_mode: str = "delta"):
        """Assemble features from a temperature history and thermal strain.

        temperature_mode "delta" feeds T(t) - T(0) (the default); "absolute"
        feeds T(t) directly.
        """
        temps = np.asarray(temps, float)
        if temperature_mode == "delta":
            tf = temps - temps[0]
        elif temperature_mode == "absolute":
            tf = temps
        else:
            raise ValueError(f"unknown temperature_mode {temperature_mode!r}")
        feats = np.column_stack([tf, target.times, np.asarray(eps_sim, float)])
        return cls(target.times, feats, target.values.copy())


@dataclass
class TrainConfig:
    """Hyperparameters for chained-rollout training."""

    chain_length: int = 20
    batch_chains: int = 8
    learning_rate: float = 1e-2
    epochs: int = 400
    plateau_patience: int = 50
    plateau_threshold: float = 1e-3   # relative improvement that resets patience
    lr_floor: float = 1e-6
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.chain_length < 2:
            raise ValueError("chain length must be >= 2")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# model


class _Branch(nn.Module):
    """Two stacked LSTM layers over the window plus a dense head."""

    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(n_in, hidden, num_layers=2, batch_first=True)
        self.head = nn.Sequential(nn.Linear(hidden, hidden), nn.Tanh(),
                                  nn.Linear(hidden, 1))

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        out, _ = self.lstm(window)
        return self.head(out[:, -1, :])


class SurrogateModel(nn.Module):
    """Scalar stabilized neural ODE d eps/dt = G(.) * eps + H(.).

    The G branch reads the exogenous window with the previous (normalized)
    state appended to every window sample; its head output is mapped
    through -softplus so the feedback coefficient is <= 0.  All inputs are
    min/max normalized with constants frozen at training time; the state
    is handled in units of the training-target infinity norm.
    """

    WINDOW = 2

    def __init__(self, dt: float, hidden: int = 16,
                 temperature_mode: str = "delta"):
        super().__init__()
        if dt <= 0.0:
            raise ValueError("dt must be > 0")
        n_feat = len(FEATURE_NAMES)
        self.g_net = _Branch(n_feat + 1, hidden)
        self.h_net = _Branch(n_feat, hidden)
        self.hidden = hidden
        self.temperature_mode = temperature_mode
        self.register_buffer("feat_lo", torch.zeros(n_feat, dtype=torch.float64))
        self.register_buffer("feat_hi", torch.ones(n_feat, dtype=torch.float64))
        self.register_buffer("target_scale", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("dt_train", torch.tensor(float(dt), dtype=torch.float64))
        self.double()

    # -- normalization ---------------------------------------------------

    def freeze_normalization(self, features: np.ndarray, target: np.ndarray):
        """Record per-feature min/max and the target infinity norm."""
        feats = np.asarray(features, float)
        lo = feats.min(axis=0)
        hi = feats.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        self.feat_lo.copy_(torch.from_numpy(lo))
        self.feat_hi.copy_(torch.from_numpy(lo + span))
        scale = float(np.max(np.abs(target)))
        self.target_scale.fill_(scale if scale > 0 else 1.0)

    def _norm(self, window: torch.Tensor) -> torch.Tensor:
        return (window - self.feat_lo) / (self.feat_hi - self.feat_lo)

    # -- ODE right-hand side ---------------------------------------------

    def gh(self, window: torch.Tensor,
           prev_norm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-step feedback g (<= 0) and source h, in normalized units."""
        if not (torch.isfinite(window).all() and torch.isfinite(prev_norm).all()):
            raise ValueError("non-finite inputs to the surrogate")
        wn = self._norm(window)
        prev_col = prev_norm.reshape(-1, 1, 1).expand(-1, wn.shape[1], 1)
        g = -nn.functional.softplus(self.g_net(torch.cat([wn, prev_col], dim=2)))
        h = self.h_net(wn)
        return g.squeeze(-1), h.squeeze(-1)

    def derivative(self, window: torch.Tensor,
                   prev_state: torch.Tensor) -> torch.Tensor:
        """d eps/dt (1/s) for physical previous state eps (batch,)."""
        prev_norm = prev_state / self.target_scale
        g, h = self.gh(window, prev_norm)
        return (g * prev_norm + h) * self.target_scale / self.dt_train


def _windows(features: np.ndarray) -> np.ndarray:
    """Two-sample trailing windows; the first window repeats sample 0."""
    feats = np.asarray(features, float)
    prev = np.vstack([feats[:1], feats[:-1]])
    return np.stack([prev, feats], axis=1)   # (n, 2, n_feat)


def rollout(model: SurrogateModel, features: np.ndarray, steps: int,
            initial: float = 0.0, dt: float | None = None) -> np.ndarray:
    """Euler rollout; returns steps+1 states starting from `initial`.

    The window used for step i -> i+1 is the last two known exogenous
    samples at index i.  Aborts if the state magnitude exceeds 1000x the
    training-target scale.
    """
    feats = np.asarray(features, float)
    if steps > feats.shape[0] - 1:
        raise ValueError("not enough exogenous samples for requested steps")
    dt = float(model.dt_train) if dt is None else float(dt)
    guard = 1e3 * float(model.target_scale)
    wins = torch.from_numpy(_windows(feats))
    out = np.empty(steps + 1)
    out[0] = initial
    state = torch.tensor([initial], dtype=torch.float64)
    with torch.no_grad():
        for i in range(steps):
            deriv = model.derivative(wins[i:i + 1], state)
            state = state + dt * deriv
            val = float(state)
            if not np.isfinite(val) or abs(val) > guard:
                raise RolloutDivergenceError(
                    f"|state| = {val:.3g} exceeded guard {guard:.3g} at step {i + 1}")
            out[i + 1] = val
    return out


def chained_loss(model: SurrogateModel, dataset: SeriesDataset,
                 chain_length: int, chain_starts) -> torch.Tensor:
    """Sum of squared rollout errors over the given chains.

    Each chain starts from the known target value at its first index and
    is rolled `chain_length` Euler steps; gradients flow through all
    steps.
    """
    starts = np.asarray(list(chain_starts), int)
    if starts.size == 0:
        raise ValueError("empty chain batch")
    if np.any(starts + chain_length > dataset.target.size - 1 + 1):
        raise ValueError("chain extends past the dataset")
    wins = torch.from_numpy(_windows(dataset.features))
    target = torch.from_numpy(dataset.target)
    dt = torch.as_tensor(dataset.dt, dtype=torch.float64)
    state = target[starts].clone()
    loss = torch.zeros((), dtype=torch.float64)
    for j in range(1, chain_length + 1):
        idx = starts + j - 1
        deriv = model.derivative(wins[idx], state)
        state = state + dt * deriv
        loss = loss + torch.sum((state - target[starts + j]) ** 2)
    return loss


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)

    def append(self, epoch: int, loss: float, lr: float):
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.learning_rates.append(lr)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "learning_rate"])
            for row in zip(self.epochs, self.losses, self.learning_rates):
                w.writerow([row[0], f"{row[1]:.12e}", f"{row[2]:.6e}"])


def _chain_grid(n_samples: int, m: int) -> np.ndarray:
    n_chains = (n_samples - 1) // m
    if n_chains < 1:
        raise ValueError("dataset too short for one chain")
    return np.arange(n_chains) * m


def train(datasets, cfg: TrainConfig, model: SurrogateModel | None = None,
          temperature_mode: str = "delta"):
    """ADAM descent on the chained loss over one or more dataset phases.

    Phases are trained sequentially on the same weights (the second
    crystallization phase extends the first beyond the initial onset).
    The learning rate is halved whenever the best loss fails to improve
    by more than `plateau_threshold` (relative) for `plateau_patience`
    epochs, down to `lr_floor`; training aborts if the loss never
    decreases for 4x the patience.
    Returns (model, TrainingReport).
    """
    if isinstance(datasets, SeriesDataset):
        datasets = [datasets]
    torch.manual_seed(cfg.seed)
    if model is None:
        model = SurrogateModel(datasets[0].dt,
                               temperature_mode=temperature_mode)
        feats = np.vstack([d.features for d in datasets])
        targ = np.concatenate([d.target for d in datasets])
        model.freeze_normalization(feats, targ)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    report = TrainingReport()
    epoch_counter = 0
    rng = np.random.default_rng(cfg.seed)

    for ds in datasets:
        starts = _chain_grid(ds.target.size, cfg.chain_length)
        best = float("inf")
        stale = 0
        never_improved = 0
        for _ in range(cfg.epochs):
            perm = rng.permutation(starts.size)
            epoch_loss = 0.0
            for lo in range(0, starts.size, cfg.batch_chains):
                batch = starts[perm[lo:lo + cfg.batch_chains]]
                opt.zero_grad()
                loss = chained_loss(model, ds, cfg.chain_length, batch)
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach())
            epoch_counter += 1
            report.append(epoch_counter, epoch_loss, opt.param_groups[0]["lr"])
            if epoch_loss < best * (1.0 - cfg.plateau_threshold):
                best = min(best, epoch_loss)
                stale = 0
            else:
                best = min(best, epoch_loss)
                stale += 1
                if stale >= cfg.plateau_patience:
                    lr = max(opt.param_groups[0]["lr"] * 0.5, cfg.lr_floor)
                    opt.param_groups[0]["lr"] = lr
                    stale = 0
            if epoch_loss >= report.losses[0] * (1.0 - 1e-12):
                never_improved += 1
                if never_improved >= 4 * cfg.plateau_patience:
                    raise RuntimeError("training loss never decreased; aborting")
            else:
                never_improved = 0
    return model, report


def split_train_test(dataset: SeriesDataset, train_fraction: float = 0.8):
    """Chronological split: first fraction for training, rest for test."""
    n = dataset.times.size
    cut = max(3, int(round(n * train_fraction)))
    cut = min(cut, n - 1)
    head = SeriesDataset(dataset.times[:cut], dataset.features[:cut],
                         dataset.target[:cut])
    tail = SeriesDataset(dataset.times[cut - 1:], dataset.features[cut - 1:],
                         dataset.target[cut - 1:])
    return head, tail


# ---------------------------------------------------------------------------
# metrics


def error_inf(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error over the target infinity norm, in percent."""
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target lengths differ")
    norm = np.max(np.abs(target))
    if norm == 0.0:
        raise ValueError("target has zero infinity norm")
    return float(100.0 * np.mean(np.abs(pred - target)) / norm)


def error_rel(pred: np.ndarray, target: np.ndarray,
              floor_fraction: float = 1e-3) -> float:
    """Mean pointwise relative error in percent.

    Indices whose |target| falls below floor_fraction * max|target| are
    excluded (with a warning) to keep the metric finite.
    """
    import warnings

    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target lengths differ")
    keep = np.abs(target) > floor_fraction * np.max(np.abs(target))
    if not keep.any():
        raise ValueError("all indices excluded: target is ~zero everywhere")
    if not keep.all():
        warnings.warn(f"excluding {np.count_nonzero(~keep)} near-zero targets "
                      "from the relative error", stacklevel=2)
    return float(100.0 * np.mean(np.abs(pred[keep] - target[keep])
                                 / np.abs(target[keep])))


def permutation_importance(model: SurrogateModel, dataset: SeriesDataset,
                           n_repeats: int = 5, chain_length: int = 20,
                           include_prev: bool = True, seed: int = 0) -> dict:
    """Mean chained-loss increase when one input feature is shuffled.

    Features are the three exogenous columns plus (optionally) the
    previous-prediction feedback, which is "shuffled" by feeding G a
    permuted copy of the rolled state.
    """
    if n_repeats < 2:
        raise ValueError("n_repeats must be >= 2")
    rng = np.random.default_rng(seed)
    starts = _chain_grid(dataset.target.size, chain_length)
    with torch.no_grad():
        base = float(chained_loss(model, dataset, chain_length, starts))
    names = list(FEATURE_NAMES) + (["previous_prediction"] if include_prev else [])
    scores = {}
    for fi, name in enumerate(names):
        increases = []
        for _ in range(n_repeats):
            perm = rng.permutation(dataset.times.size)
            if name == "previous_prediction":
                loss = _loss_with_shuffled_state(model, dataset, chain_length,
                                                 starts, rng)
            else:
                feats = dataset.features.copy()
                feats[:, fi] = feats[perm, fi]
                shuffled = SeriesDataset(dataset.times, feats, dataset.target)
                with torch.no_grad():
                    loss = float(chained_loss(model, shuffled, chain_length,
                                              starts))
            increases.append(loss - base)
        scores[name] = float(np.mean(increases))
    return scores


def _loss_with_shuffled_state(model, dataset, m, starts, rng) -> float:
    """Chained loss with the previous-prediction input permuted across the
    batch at every step: the decoy state replaces the true one everywhere
    it enters the derivative (G's input and the feedback product), while
    the rolled state itself stays intact."""
    wins = torch.from_numpy(_windows(dataset.features))
    target = torch.from_numpy(dataset.target)
    dt = torch.as_tensor(dataset.dt, dtype=torch.float64)
    state = target[starts].clone()
    loss = 0.0
    with torch.no_grad():
        for j in range(1, m + 1):
            idx = starts + j - 1
            decoy = state[torch.from_numpy(rng.permutation(state.shape[0]))]
            deriv = model.derivative(wins[idx], decoy)
            state = state + dt * deriv
            loss += float(torch.sum((state - target[starts + j]) ** 2))
    return loss


# ---------------------------------------------------------------------------
# serialization


def save_model(path, model: SurrogateModel):
    """Versioned weight file: format tag, shapes, normalization, weights."""
    torch.save({
        "format": _FORMAT_TAG,
        "hidden": model.hidden,
        "temperature_mode": model.temperature_mode,
        "dt": float(model.dt_train),
        "feat_lo": model.feat_lo.numpy().tolist(),
        "feat_hi": model.feat_hi.numpy().tolist(),
        "target_scale": float(model.target_scale),
        "state_dict": model.state_dict(),
    }, path)


def load_model(path) -> SurrogateModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != _FORMAT_TAG:
        raise ValueError(f"unrecognized model file format {blob.get('format')!r}")
    model = SurrogateModel(blob["dt"], hidden=blob["hidden"],
                           temperature_mode=blob["temperature_mode"])
    model.load_state_dict(blob["state_dict"])
    return model
