"""Mini-batch SGD with heavy-ball momentum, coupled weight decay and one step decay."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .network import LabeledDataset, NetworkSpec, ParamVector, init_params, mean_loss

DIVERGENCE_LOSS = 1e4


@dataclass
class TrainConfig:
    eta: float = 0.1
    rho: float = 1.0
    delta: float = 1.0
    lambda_wd: float = 0.0
    gamma: float = 0.0
    batch_size: int = 32
    step_budget: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not self.lambda_wd >= 0:
            raise ValueError("lambda_wd must be nonnegative")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 1 or self.step_budget < 1:
            raise ValueError("batch_size and step_budget must be positive")

    @property
    def decay_step(self) -> int:
        """First step index that uses the decayed learning rate."""
        return math.floor(self.delta * self.step_budget)

    def learning_rate(self, step: int) -> float:
        return self.eta if step < self.decay_step else self.eta * self.rho

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Snapshot:
    step: int
    epoch: int
    params: ParamVector
    train_loss: float
    validation_loss: float


@dataclass
class TrainResult:
    params: ParamVector
    snapshots: list[Snapshot]
    diverged: bool = False
    diverged_step: int | None = None


class Trainer:
    """Resumable training run.

    ``run(until_step)`` advances to a step count and can be called again to
    continue; the shuffle generator, permutation and momentum buffer carry
    over so the trajectory is identical to one uninterrupted run.
    """

    def __init__(self, spec: NetworkSpec, dataset: LabeledDataset, config: TrainConfig,
                 params: ParamVector | None = None, record_snapshots: bool = True):
        self.spec, self.dataset, self.config = spec, dataset, config
        self.x, self.y = dataset.subset("train")
        if config.batch_size > self.y.size:
            raise ValueError(f"batch size {config.batch_size} exceeds the {self.y.size} training examples")
        start = params if params is not None else init_params(spec, [config.seed, 0])
        self.theta = start.values.copy()
        self.layout = start.layout
        self.velocity = np.zeros_like(self.theta)
        self.grad = np.empty_like(self.theta)
        self.rng = np.random.default_rng([config.seed, 1])
        self.perm = None
        self.pos = 0
        self.step = 0
        self.epoch = 0
        self.steps_taken = 0
        self.diverged = False
        self.diverged_step = None
        self.record_snapshots = record_snapshots
        self.snapshots: list[Snapshot] = []
        if record_snapshots:
            self._snapshot()

    @property
    def params(self) -> ParamVector:
        return ParamVector(self.theta.copy(), self.layout)

    def _snapshot(self):
        p = self.params
        has_val = self.dataset.size("validation") > 0
        self.snapshots.append(Snapshot(
            step=self.step,
            epoch=self.epoch,
            params=p,
            train_loss=mean_loss(self.spec, p, self.dataset, "train"),
            validation_loss=mean_loss(self.spec, p, self.dataset, "validation") if has_val else float("nan"),
        ))

    def run(self, until_step: int | None = None) -> "Trainer":
        cfg = self.config
        until = cfg.step_budget if until_step is None else until_step
        n = self.y.size
        while self.step < until and not self.diverged:
            if self.perm is None:
                self.perm = self.rng.permutation(n)
                self.pos = 0
            idx = self.perm[self.pos:self.pos + cfg.batch_size]
            loss, _ = kernels.batch_loss_grad(self.spec, ParamVector(self.theta, self.layout),
                                              self.x[idx], self.y[idx], out=self.grad)
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                self.diverged = True
                self.diverged_step = self.step
                break
            kernels.momentum_step(self.theta, self.velocity, self.grad, cfg.learning_rate(self.step),
                                  cfg.lambda_wd, cfg.gamma)
            self.step += 1
            self.steps_taken += 1
            self.pos += idx.size
            boundary = self.pos >= n
            if boundary:
                self.epoch += 1
                self.perm = None
            if not np.all(np.isfinite(self.theta)):
                self.diverged = True
                self.diverged_step = self.step
                break
            if self.record_snapshots and (boundary or self.step == cfg.step_budget):
                self._snapshot()
        return self

    def result(self) -> TrainResult:
        if self.diverged:
            last = self.snapshots[-1].params if self.snapshots else None
            return TrainResult(last, list(self.snapshots), True, self.diverged_step)
        return TrainResult(self.params, list(self.snapshots))

    def state_dict(self) -> dict:
        return {
            "theta": self.theta.copy(),
            "velocity": self.velocity.copy(),
            "rng": copy.deepcopy(self.rng.bit_generator.state),
            "perm": None if self.perm is None else self.perm.copy(),
            "pos": self.pos,
            "step": self.step,
            "epoch": self.epoch,
            "diverged": self.diverged,
            "diverged_step": self.diverged_step,
        }

    def load_state_dict(self, state: dict) -> None:
        self.theta = state["theta"].copy()
        self.velocity = state["velocity"].copy()
        self.rng.bit_generator.state = copy.deepcopy(state["rng"])
        self.perm = None if state["perm"] is None else state["perm"].copy()
        self.pos = state["pos"]
        self.step = state["step"]
        self.epoch = state["epoch"]
        self.diverged = state["diverged"]
        self.diverged_step = state["diverged_step"]


def train(spec: NetworkSpec, dataset: LabeledDataset, config: TrainConfig,
          params: ParamVector | None = None) -> TrainResult:
    """Run ``config.step_budget`` steps, snapshotting at start, epoch ends and the last step."""
    return Trainer(spec, dataset, config, params).run().result()


SNAPSHOT_COLUMNS = ("trial_id", "step", "epoch", "train_loss", "validation_loss")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_snapshot_csv(path, snapshots, trial_id: int = 0, mode: str = "w") -> None:
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(SNAPSHOT_COLUMNS)
        for s in snapshots:
            writer.writerow([trial_id, s.step, s.epoch, fmt(s.train_loss), fmt(s.validation_loss)])
