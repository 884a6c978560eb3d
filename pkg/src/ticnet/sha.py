"""Successive Halving over sampled hyperparameters with a pluggable rung metric."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import curvature as cv
from .experiments import HpSpace, trial_config
from .network import LabeledDataset, NetworkSpec, ParamVector, mean_loss
from .tic import TicConfig, tic_report
from .train import TrainConfig, Trainer


class Metric(str, Enum):
    VALIDATION_LOSS = "validation_loss"
    TIC_SCORE = "tic_score"
    ORACLE = "oracle"


class Status(str, Enum):
    PRUNED = "pruned"
    COMPLETED = "completed"
    DIVERGED = "diverged"


@dataclass
class ShaConfig:
    num_trials: int = 27
    reduction_factor: int = 3
    min_resource: int = 10
    num_rungs: int = 4
    metric: Metric = Metric.VALIDATION_LOSS
    tic_config: TicConfig | None = None

    def __post_init__(self):
        self.metric = Metric(self.metric)
        if self.num_trials < 2 or self.reduction_factor < 2 or self.min_resource < 1 or self.num_rungs < 1:
            raise ValueError("need num_trials >= 2, reduction_factor >= 2, min_resource >= 1, num_rungs >= 1")
        if self.num_trials < self.reduction_factor ** (self.num_rungs - 1):
            raise ValueError("num_trials must be at least reduction_factor ** (num_rungs - 1)")

    def resource(self, rung: int) -> int:
        return self.min_resource * self.reduction_factor ** rung

    @property
    def max_resource(self) -> int:
        return self.resource(self.num_rungs - 1)

    def survivor_counts(self) -> list[int]:
        """Trials entering each rung, followed by the single winner."""
        counts = [self.num_trials]
        for _ in range(self.num_rungs):
            counts.append(math.ceil(counts[-1] / self.reduction_factor))
        counts[-1] = 1
        return counts

    def closed_form_steps(self) -> int:
        counts = self.survivor_counts()
        prev = 0
        total = 0
        for r in range(self.num_rungs):
            total += counts[r] * (self.resource(r) - prev)
            prev = self.resource(r)
        return total

    def to_dict(self) -> dict:
        return {
            "num_trials": self.num_trials,
            "reduction_factor": self.reduction_factor,
            "min_resource": self.min_resource,
            "num_rungs": self.num_rungs,
            "metric": self.metric.value,
            "tic_config": self.tic_config.to_dict() if self.tic_config else None,
        }


@dataclass
class TrialRecord:
    trial_id: int
    hyperparameters: TrainConfig
    rung_metrics: list[tuple[int, int, float]] = field(default_factory=list)
    status: Status = Status.COMPLETED
    pruned_rung: int | None = None
    diverged_step: int | None = None
    final_validation_loss: float | None = None
    steps_consumed: int = 0

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "hyperparameters": self.hyperparameters.to_dict(),
            "rung_metrics": [list(m) for m in self.rung_metrics],
            "status": self.status.value,
            "pruned_rung": self.pruned_rung,
            "diverged_step": self.diverged_step,
            "final_validation_loss": self.final_validation_loss,
            "steps_consumed": self.steps_consumed,
        }


@dataclass
class ShaResult:
    records: list[TrialRecord]
    winner: int
    events: list[dict]
    steps_consumed: int
    rung_sizes: list[int]

    def summary(self) -> dict:
        return {
            "winner": self.winner,
            "steps_consumed": self.steps_consumed,
            "rung_sizes": self.rung_sizes,
            "trials": [r.to_dict() for r in self.records],
        }

    def write_events(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


OracleFn = Callable[[int, int, ParamVector], float]


def _default_tic_config(spec: NetworkSpec) -> TicConfig:
    if spec.num_params > cv.DEFAULT_DENSE_CAP:
        return TicConfig(fidelities=("lower_bound",), trace_h_source="hutchinson")
    return TicConfig(fidelities=("lower_bound",))


def rank_key(trial_id: int, metric: float | None, diverged_step: int | None):
    """Sort key: finite metrics ascending, then non-finite, then diverged (earliest last)."""
    if diverged_step is not None:
        return (2, -diverged_step, trial_id)
    if metric is None or not math.isfinite(metric):
        return (1, 0.0, trial_id)
    return (0, metric, trial_id)


def run_sha(spec: NetworkSpec, dataset: LabeledDataset, hp_space: HpSpace, config: ShaConfig, seed: int = 0,
            oracle: OracleFn | None = None) -> ShaResult:
    """Successive Halving where rung ``r`` trains survivors to ``min_resource * eta**r`` steps.

    Each trial's learning-rate schedule is laid out over the top-rung
    resource. Between rungs a trial is reduced to its checkpoint (parameters,
    momentum, shuffle state) and restored before resuming.
    """
    if config.metric is Metric.ORACLE and oracle is None:
        raise ValueError("oracle metric needs an oracle function")
    tic_config = config.tic_config or _default_tic_config(spec)
    space = replace(hp_space, step_budget=config.max_resource)
    records = [TrialRecord(t, trial_config(space, seed, t)) for t in range(config.num_trials)]
    checkpoints: dict[int, dict] = {}
    events: list[dict] = []
    alive = [r.trial_id for r in records]
    rung_sizes = []

    def metric_of(trial_id: int, rung: int, trainer: Trainer) -> float:
        params = trainer.params
        if config.metric is Metric.VALIDATION_LOSS:
            return mean_loss(spec, params, dataset, "validation")
        if config.metric is Metric.ORACLE:
            return float(oracle(trial_id, rung, params))
        try:
            return tic_report(spec, params, dataset, tic_config).tic_score
        except (np.linalg.LinAlgError, ValueError):
            return float("inf")

    for rung in range(config.num_rungs):
        resource = config.resource(rung)
        rung_sizes.append(len(alive))
        scored = []
        for t in alive:
            rec = records[t]
            trainer = Trainer(spec, dataset, rec.hyperparameters, record_snapshots=False)
            if t in checkpoints:
                trainer.load_state_dict(checkpoints[t])
            trainer.run(resource)
            rec.steps_consumed += trainer.steps_taken
            checkpoints[t] = trainer.state_dict()
            if trainer.diverged:
                rec.status = Status.DIVERGED
                rec.diverged_step = trainer.diverged_step
                value = None
            else:
                value = metric_of(t, rung, trainer)
                rec.rung_metrics.append((rung, resource, value))
                if rung == config.num_rungs - 1:
                    rec.final_validation_loss = mean_loss(spec, trainer.params, dataset, "validation")
            scored.append((rank_key(t, value, rec.diverged_step), t, value))
        if rung == 0 and all(records[t].status is Status.DIVERGED for t in alive):
            raise RuntimeError("every trial diverged in the first rung")
        scored.sort()
        keep = 1 if rung == config.num_rungs - 1 else math.ceil(len(alive) / config.reduction_factor)
        advancing = {t for _, t, _ in scored[:keep]}
        for _, t, value in scored:
            action = "advance" if t in advancing else "prune"
            shown = value if value is not None and math.isfinite(value) else None
            events.append({"rung": rung, "trial_id": t, "resource": resource, "metric": shown, "action": action})
            rec = records[t]
            if t not in advancing and rec.status is not Status.DIVERGED and rung < config.num_rungs - 1:
                rec.status = Status.PRUNED
                rec.pruned_rung = rung
        for t in alive:
            if t not in advancing and t in checkpoints:
                del checkpoints[t]
        alive = [t for _, t, _ in scored[:keep]]

    return ShaResult(records, alive[0], events, sum(r.steps_consumed for r in records), rung_sizes)


def full_training_ranking(spec: NetworkSpec, dataset: LabeledDataset, hp_space: HpSpace, config: ShaConfig,
                          seed: int = 0) -> tuple[list[int], dict[int, float]]:
    """Train every trial to the top-rung resource; return the true order and final validation losses."""
    space = replace(hp_space, step_budget=config.max_resource)
    finals: dict[int, float] = {}
    keys = []
    for t in range(config.num_trials):
        trainer = Trainer(spec, dataset, trial_config(space, seed, t), record_snapshots=False).run()
        if trainer.diverged:
            finals[t] = float("inf")
            keys.append(rank_key(t, None, trainer.diverged_step))
        else:
            finals[t] = mean_loss(spec, trainer.params, dataset, "validation")
            keys.append(rank_key(t, finals[t], None))
    order = [k[2] for k in sorted(keys)]
    return order, finals


ARMS = (Metric.VALIDATION_LOSS, Metric.TIC_SCORE, Metric.ORACLE)


def compare_pruning(spec: NetworkSpec, dataset: LabeledDataset, hp_space: HpSpace, config: ShaConfig,
                    num_repeats: int, seed: int = 0) -> dict:
    """True final rank of the trial each metric's SHA run selects, over repeated trial draws.

    All arms of a repeat share trial hyperparameters and training seeds; the
    oracle arm ranks trials by their full-training validation loss and so
    serves as a control.
    """
    if num_repeats < 1:
        raise ValueError("need at least one repeat")
    repeats = []
    histograms = {arm.value: {str(k): 0 for k in range(1, config.num_trials + 1)} for arm in ARMS}
    for k in range(num_repeats):
        repeat_seed = int(np.random.default_rng([seed, k]).integers(2**31 - 1))
        order, finals = full_training_ranking(spec, dataset, hp_space, config, repeat_seed)
        true_rank = {t: i + 1 for i, t in enumerate(order)}
        entry = {"repeat": k, "seed": repeat_seed, "true_order": order}
        for arm in ARMS:
            arm_config = replace(config, metric=arm)
            result = run_sha(spec, dataset, hp_space, arm_config, repeat_seed,
                             oracle=lambda t, rung, params: finals[t])
            rank = true_rank[result.winner]
            entry[arm.value] = {"winner": result.winner, "true_rank": rank, "steps": result.steps_consumed}
            histograms[arm.value][str(rank)] += 1
        repeats.append(entry)
    return {"config": config.to_dict(), "num_repeats": num_repeats, "seed": seed,
            "repeats": repeats, "rank_histograms": histograms}
