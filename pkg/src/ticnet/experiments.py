"""Synthetic data, hyperparameter sweeps, correlation metrics and LOOCV."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .network import LabeledDataset, NetworkSpec, ParamVector, init_params, loss, forward, mean_loss
from .tic import FIDELITIES, TicConfig, TicReport, tic_report
from .train import TrainConfig, Trainer, fmt


def make_blobs(num_classes: int, dim: int, n: int, class_separation: float, seed=0) -> LabeledDataset:
    """Gaussian mixture with one unit-variance spherical component per class.

    Class means sit at ``class_separation`` along random directions, mutually
    orthogonal when ``num_classes <= dim``. Classes are balanced and the data
    are split 70/15/15 into train/validation/test.
    """
    if num_classes < 2 or dim < 1:
        raise ValueError("need at least two classes and one dimension")
    if n < num_classes:
        raise ValueError("need at least one example per class")
    if not class_separation >= 0:
        raise ValueError("class separation must be nonnegative")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((max(dim, num_classes), dim))
    if num_classes <= dim:
        q, _ = np.linalg.qr(directions[:dim].T)
        directions = q.T[:num_classes]
    else:
        directions = directions[:num_classes] / np.linalg.norm(directions[:num_classes], axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % num_classes)
    features = class_separation * directions[labels] + rng.standard_normal((n, dim))
    return LabeledDataset.from_fractions(features, labels, seed=rng.integers(2**32))


def generalization_gap(spec: NetworkSpec, params: ParamVector, dataset: LabeledDataset) -> float:
    """``|mean train loss - mean test loss|``."""
    return abs(mean_loss(spec, params, dataset, "train") - mean_loss(spec, params, dataset, "test"))


def accuracy(spec: NetworkSpec, params: ParamVector, dataset: LabeledDataset, split: str = "test") -> float:
    x, y = dataset.subset(split)
    return float(np.mean(np.argmax(forward(spec, params, x), axis=1) == y))


_LOG_SCALE = ("eta", "lambda_wd")


@dataclass
class HpSpace:
    """Search ranges; ``eta`` and ``lambda_wd`` are sampled log-uniformly."""

    eta: tuple[float, float] = (1e-4, 1e-1)
    rho: tuple[float, float] = (0.5, 1.0)
    delta: tuple[float, float] = (0.5, 1.0)
    lambda_wd: tuple[float, float] = (0.0, 0.0)
    gamma: tuple[float, float] = (0.0, 0.999)
    batch_size: int = 32
    step_budget: int = 300

    def __post_init__(self):
        for name in ("eta", "rho", "delta", "lambda_wd", "gamma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty")
            if name in _LOG_SCALE and lo <= 0 < hi:
                raise ValueError(f"{name} is log-uniform and needs a positive lower bound")
            setattr(self, name, (float(lo), float(hi)))

    def sample(self, rng: np.random.Generator, seed: int) -> TrainConfig:
        values = {}
        for name in ("eta", "rho", "delta", "lambda_wd", "gamma"):
            lo, hi = getattr(self, name)
            u = rng.random()
            if lo == hi:
                values[name] = lo
            elif name in _LOG_SCALE:
                values[name] = float(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo))))
            else:
                values[name] = lo + u * (hi - lo)
        return TrainConfig(batch_size=self.batch_size, step_budget=self.step_budget, seed=seed, **values)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HpSpace":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def trial_config(hp_space: HpSpace, sweep_seed: int, trial_id: int) -> TrainConfig:
    """Hyperparameters and training seed of one trial, independent of other trials."""
    rng = np.random.default_rng([sweep_seed, trial_id])
    train_seed = int(rng.integers(2**31 - 1))
    return hp_space.sample(rng, train_seed)


@dataclass
class SweepRow:
    trial_id: int
    hyperparameters: TrainConfig
    d_over_n: float
    diverged: bool
    gen_gap: float | None = None
    train_loss: float | None = None
    test_loss: float | None = None
    tic_report: TicReport | None = None


_HP_COLUMNS = ("eta", "rho", "delta", "lambda_wd", "gamma", "batch_size", "step_budget", "seed")
_TIC_COLUMNS = ("bias_exact", "bias_block", "bias_diag", "bias_lower_bound", "trace_h", "trace_c",
                "trace_f", "damping_lambda", "mean_empirical_loss", "tic_score")


@dataclass
class SweepResult:
    rows: list[SweepRow]

    @property
    def completed(self) -> list[SweepRow]:
        return [r for r in self.rows if not r.diverged]

    @property
    def num_diverged(self) -> int:
        return sum(r.diverged for r in self.rows)

    def columns(self) -> list[str]:
        return ["trial_id", *_HP_COLUMNS, "d_over_n", "diverged", "gen_gap", "train_loss", "test_loss", *_TIC_COLUMNS]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns())
            for r in self.rows:
                hp = r.hyperparameters
                tic = r.tic_report
                writer.writerow(
                    [r.trial_id, *(fmt(getattr(hp, c)) for c in _HP_COLUMNS), fmt(r.d_over_n), int(r.diverged),
                     fmt(r.gen_gap), fmt(r.train_loss), fmt(r.test_loss),
                     *(fmt(getattr(tic, c)) if tic else "" for c in _TIC_COLUMNS)]
                )

    def to_dict(self) -> dict:
        return {"rows": [
            {
                "trial_id": r.trial_id,
                "hyperparameters": r.hyperparameters.to_dict(),
                "d_over_n": r.d_over_n,
                "diverged": r.diverged,
                "gen_gap": r.gen_gap,
                "train_loss": r.train_loss,
                "test_loss": r.test_loss,
                "tic_report": r.tic_report.to_dict() if r.tic_report else None,
            }
            for r in self.rows
        ]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def correlation_summary(self, min_points: int = 3) -> dict:
        """Correlation triple of each bias fidelity (and the TIC score) with the gap."""
        rows = self.completed
        summary = {"n_points": len(rows), "n_diverged": self.num_diverged, "correlations": {}}
        if len(rows) < min_points:
            summary["warning"] = f"need at least {min_points} completed trials for correlations, have {len(rows)}"
            return summary
        gaps = [r.gen_gap for r in rows]
        keys = [f"bias_{f}" for f in FIDELITIES] + ["tic_score"]
        for key in keys:
            values = [getattr(r.tic_report, key) for r in rows]
            if any(v is None for v in values):
                continue
            try:
                summary["correlations"][key] = asdict(correlations(values, gaps))
            except ValueError as exc:
                summary["correlations"][key] = {"error": str(exc)}
        return summary


def run_trial(spec: NetworkSpec, dataset: LabeledDataset, config: TrainConfig, tic_config: TicConfig,
              trial_id: int = 0) -> SweepRow:
    trainer = Trainer(spec, dataset, config, record_snapshots=False).run()
    d_over_n = spec.num_params / dataset.size("train")
    if trainer.diverged:
        return SweepRow(trial_id, config, d_over_n, True)
    params = trainer.params
    train_loss = mean_loss(spec, params, dataset, "train")
    test_loss = mean_loss(spec, params, dataset, "test")
    try:
        report = tic_report(spec, params, dataset, tic_config)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return SweepRow(trial_id, config, d_over_n, True, abs(train_loss - test_loss), train_loss, test_loss)
    return SweepRow(trial_id, config, d_over_n, False, abs(train_loss - test_loss), train_loss, test_loss, report)


def run_sweep(spec: NetworkSpec, dataset: LabeledDataset, hp_space: HpSpace, num_trials: int,
              tic_config: TicConfig | None = None, seed: int = 0) -> SweepResult:
    """Random search: train each sampled configuration and score its final parameters.

    Trials that diverge (or whose curvature is too degenerate to estimate)
    are kept as flagged rows and left out of correlations.
    """
    if num_trials < 1:
        raise ValueError("need at least one trial")
    tic_config = tic_config or TicConfig()
    rows = [run_trial(spec, dataset, trial_config(hp_space, seed, t), tic_config, t) for t in range(num_trials)]
    result = SweepResult(rows)
    if not result.completed:
        raise RuntimeError("every trial diverged")
    return result


@dataclass
class CorrelationTriple:
    pearson: float
    spearman: float
    kendall_tau: float
    n_points: int


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = a @ a, b @ b
    if saa == 0 or sbb == 0:
        raise ValueError("correlation is undefined for a constant sequence")
    return float(np.clip((a @ b) / math.sqrt(saa * sbb), -1.0, 1.0))


def _tau_b(x: np.ndarray, y: np.ndarray) -> float:
    # Integer pair counts keep perfect (anti-)concordance at exactly +-1.
    concordance = 0
    untied_x = untied_y = 0
    for i in range(x.size - 1):
        sx = np.sign(x[i + 1:] - x[i]).astype(np.int64)
        sy = np.sign(y[i + 1:] - y[i]).astype(np.int64)
        concordance += int(sx @ sy)
        untied_x += int(np.count_nonzero(sx))
        untied_y += int(np.count_nonzero(sy))
    return float(np.clip(concordance / math.sqrt(untied_x * untied_y), -1.0, 1.0))


def correlations(xs, ys) -> CorrelationTriple:
    """Pearson, Spearman (average ranks for ties) and Kendall tau-b."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("sequences must be one-dimensional and of equal length")
    if x.size < 3:
        raise ValueError("need at least three points")
    pearson = _pearson(x, y)
    spearman = _pearson(stats.rankdata(x), stats.rankdata(y))
    return CorrelationTriple(pearson, spearman, _tau_b(x, y), int(x.size))


MAX_LOOCV_TRAIN = 200


def loocv_estimate(spec: NetworkSpec, dataset: LabeledDataset, config: TrainConfig,
                   params: ParamVector | None = None) -> float:
    """Mean held-out loss over ``n`` retrainings, each leaving out one training point.

    Every fold starts from the same initial parameters and shuffle seed.
    """
    x, y = dataset.subset("train")
    n = y.size
    if n > MAX_LOOCV_TRAIN:
        raise ValueError(f"LOOCV is limited to {MAX_LOOCV_TRAIN} training points, got {n}")
    if n < 2:
        raise ValueError("LOOCV needs at least two training points")
    start = params if params is not None else init_params(spec, [config.seed, 0])
    fold_config = TrainConfig(**{**config.to_dict(), "batch_size": min(config.batch_size, n - 1)})
    held_out = np.empty(n)
    for i in range(n):
        keep = np.delete(np.arange(n), i)
        fold = LabeledDataset(np.concatenate([x[keep], x[i:i + 1]]), np.concatenate([y[keep], y[i:i + 1]]),
                              {"train": np.arange(n - 1), "validation": [n - 1]})
        fitted = Trainer(spec, fold, fold_config, start, record_snapshots=False).run().params
        held_out[i] = loss(forward(spec, fitted, x[i]), int(y[i]))
    return float(held_out.mean())


def ntk_drift(spec: NetworkSpec, dataset: LabeledDataset, config: TrainConfig, probe_size: int = 8):
    """Relative Frobenius change of the empirical NTK on a probe batch at every snapshot.

    The probe batch is the first ``probe_size`` training examples. Returns
    ``(rows, result)`` with rows of ``(step, drift)``.
    """
    from .curvature import kernel_drift, ntk_gram
    from .train import train

    if probe_size < 1:
        raise ValueError("probe batch must be nonempty")
    probe, _ = dataset.subset("train")
    probe = probe[:probe_size]
    result = train(spec, dataset, config)
    gram0 = ntk_gram(spec, result.snapshots[0].params, probe)
    rows = [(s.step, kernel_drift(ntk_gram(spec, s.params, probe), gram0)) for s in result.snapshots]
    return rows, result
