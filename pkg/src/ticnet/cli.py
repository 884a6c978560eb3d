"""Command-line entry point.

Each command reads one JSON config, resolves defaults, echoes the resolved
config into a fresh output directory and writes its CSV/JSON results there.

Exit codes: 0 success, 2 config error, 3 divergence, 4 dimension mismatch,
5 resource cap.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import curvature as cv
from . import experiments as ex
from . import sha
from .idx import load_idx_dataset
from .network import DimensionError, NetworkSpec, ParamVector, check_params, mean_loss
from .tic import TicConfig, tic_report
from .train import Trainer, TrainConfig, fmt, write_snapshot_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DIMENSION, EXIT_CAP = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class DivergedError(RuntimeError):
    pass


def _obj(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object")
    return dict(value)


def _require(tree: dict, key: str, path: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: expected an object")
    if key not in tree:
        raise ConfigError(f"{path}.{key}: required field is missing" if path else f"{key}: required field is missing")
    return tree[key]


def _dataclass_section(cls, tree: dict | None, path: str, defaults: dict | None = None):
    tree = _obj(tree, path)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    for k, v in (defaults or {}).items():
        tree.setdefault(k, v)
    try:
        if cls is ex.HpSpace:
            return ex.HpSpace.from_dict(tree)
        return cls(**tree)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _resolve_data(cfg: dict, seed: int):
    data = _obj(_require(cfg, "data", ""), "data")
    kind = _require(data, "kind", "data")
    data.setdefault("seed", seed)
    try:
        if kind == "blobs":
            for key in ("num_classes", "dim", "n", "class_separation"):
                _require(data, key, "data")
            unknown = sorted(set(data) - {"kind", "num_classes", "dim", "n", "class_separation", "seed"})
            if unknown:
                raise ConfigError(f"data.{unknown[0]}: unknown field")
            dataset = ex.make_blobs(int(data["num_classes"]), int(data["dim"]), int(data["n"]),
                                    float(data["class_separation"]), data["seed"])
        elif kind == "idx":
            for key in ("images", "labels"):
                _require(data, key, "data")
            data.setdefault("pool", 1)
            data.setdefault("limit", None)
            unknown = sorted(set(data) - {"kind", "images", "labels", "pool", "limit", "seed"})
            if unknown:
                raise ConfigError(f"data.{unknown[0]}: unknown field")
            dataset = load_idx_dataset(data["images"], data["labels"], int(data["pool"]), data["limit"],
                                       seed=data["seed"])
        else:
            raise ConfigError(f"data.kind: unknown dataset kind {kind!r}")
    except (ValueError, TypeError, OSError) as exc:
        if isinstance(exc, (ConfigError, DimensionError)):
            raise
        raise ConfigError(f"data: {exc}") from exc
    return data, dataset


def _resolve_network(cfg: dict, dataset) -> NetworkSpec:
    net = _obj(_require(cfg, "network", ""), "network")
    _require(net, "hidden_widths", "network")
    unknown = sorted(set(net) - {"input_dim", "hidden_widths", "num_classes", "activation", "skip_connections"})
    if unknown:
        raise ConfigError(f"network.{unknown[0]}: unknown field")
    net.setdefault("input_dim", dataset.features.shape[1])
    net.setdefault("num_classes", max(dataset.num_classes, 2))
    try:
        spec = NetworkSpec.from_dict(net)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DimensionError):
            raise
        raise ConfigError(f"network: {exc}") from exc
    if spec.input_dim != dataset.features.shape[1]:
        raise DimensionError(f"network.input_dim is {spec.input_dim} but the data have {dataset.features.shape[1]} features")
    if dataset.num_classes > spec.num_classes:
        raise DimensionError(f"network.num_classes is {spec.num_classes} but labels reach {dataset.num_classes - 1}")
    return spec


class Run:
    """Resolved config plus the objects built from it."""

    def __init__(self, cfg: dict, sections: tuple[str, ...]):
        if not isinstance(cfg, dict):
            raise ConfigError("config: expected a JSON object")
        allowed = {"seed", "network", "data", *sections}
        unknown = sorted(set(cfg) - allowed)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown section for this command")
        seed = cfg.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed: expected a nonnegative integer")
        self.seed = seed
        data_cfg, self.dataset = _resolve_data(cfg, seed)
        self.spec = _resolve_network(cfg, self.dataset)
        self.resolved = {"seed": seed, "data": data_cfg, "network": self.spec.to_dict()}
        if "train" in sections:
            self.train = _dataclass_section(TrainConfig, cfg.get("train"), "train", {"seed": seed})
            self.resolved["train"] = self.train.to_dict()
        if "tic" in sections:
            self.tic = _dataclass_section(TicConfig, cfg.get("tic"), "tic", {"seed": seed})
            self.resolved["tic"] = self.tic.to_dict()
        if "sweep" in sections:
            sweep = _obj(cfg.get("sweep"), "sweep")
            unknown = sorted(set(sweep) - {"num_trials", "hp_space"})
            if unknown:
                raise ConfigError(f"sweep.{unknown[0]}: unknown field")
            self.num_trials = sweep.get("num_trials", 10)
            if not isinstance(self.num_trials, int) or self.num_trials < 1:
                raise ConfigError("sweep.num_trials: expected a positive integer")
            self.hp_space = _dataclass_section(ex.HpSpace, sweep.get("hp_space"), "sweep.hp_space")
            self.resolved["sweep"] = {"num_trials": self.num_trials, "hp_space": self.hp_space.to_dict()}
        if "sha" in sections:
            sha_cfg = _obj(cfg.get("sha"), "sha")
            self.compare_repeats = sha_cfg.pop("compare_repeats", None)
            hp = sha_cfg.pop("hp_space", None)
            self.hp_space = _dataclass_section(ex.HpSpace, hp, "sha.hp_space")
            tic_cfg = sha_cfg.pop("tic_config", None)
            if tic_cfg is not None:
                sha_cfg["tic_config"] = _dataclass_section(TicConfig, tic_cfg, "sha.tic_config", {"seed": seed})
            self.sha = _dataclass_section(sha.ShaConfig, sha_cfg, "sha")
            if self.compare_repeats is not None and (not isinstance(self.compare_repeats, int)
                                                     or self.compare_repeats < 1):
                raise ConfigError("sha.compare_repeats: expected a positive integer")
            self.resolved["sha"] = {**self.sha.to_dict(), "hp_space": self.hp_space.to_dict(),
                                    "compare_repeats": self.compare_repeats}
        if "ntk" in sections:
            ntk = _obj(cfg.get("ntk"), "ntk")
            unknown = sorted(set(ntk) - {"probe_size"})
            if unknown:
                raise ConfigError(f"ntk.{unknown[0]}: unknown field")
            self.probe_size = ntk.get("probe_size", 8)
            if not isinstance(self.probe_size, int) or self.probe_size < 1:
                raise ConfigError("ntk.probe_size: expected a positive integer")
            self.resolved["ntk"] = {"probe_size": self.probe_size}


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_output(out: str, run: Run) -> str:
    if os.path.isdir(out) and os.listdir(out):
        raise ConfigError(f"output directory {out} exists and is not empty")
    os.makedirs(out, exist_ok=True)
    dump_json(run.resolved, os.path.join(out, "config.json"))
    return out


def cmd_train(run: Run, out: str) -> int:
    trainer = Trainer(run.spec, run.dataset, run.train).run()
    result = trainer.result()
    write_snapshot_csv(os.path.join(out, "snapshots.csv"), result.snapshots)
    if result.params is not None:
        np.save(os.path.join(out, "params.npy"), result.params.values)
    summary = {"diverged": result.diverged, "diverged_step": result.diverged_step, "steps": trainer.step,
               "num_params": run.spec.num_params}
    if not result.diverged:
        summary["train_loss"] = mean_loss(run.spec, result.params, run.dataset, "train")
        summary["test_loss"] = mean_loss(run.spec, result.params, run.dataset, "test")
        summary["gen_gap"] = ex.generalization_gap(run.spec, result.params, run.dataset)
    dump_json(summary, os.path.join(out, "summary.json"))
    if result.diverged:
        raise DivergedError(f"training diverged at step {result.diverged_step}")
    return EXIT_OK


def _load_params(run: Run, path: str | None) -> ParamVector:
    if path is None:
        raise ConfigError("--params: a parameter file is required")
    try:
        values = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"--params: {exc}") from exc
    if values.ndim != 1 or values.size != run.spec.num_params:
        raise DimensionError(f"parameter file holds {values.size} values, network needs {run.spec.num_params}")
    params = ParamVector(np.asarray(values, dtype=np.float64), run.spec.layout())
    check_params(run.spec, params)
    return params


def cmd_tic(run: Run, out: str, params_path: str | None) -> int:
    params = _load_params(run, params_path)
    report = tic_report(run.spec, params, run.dataset, run.tic)
    dump_json(report.to_dict(), os.path.join(out, "tic_report.json"))
    return EXIT_OK


def cmd_sweep(run: Run, out: str) -> int:
    try:
        result = ex.run_sweep(run.spec, run.dataset, run.hp_space, run.num_trials, run.tic, run.seed)
    except RuntimeError as exc:
        raise DivergedError(str(exc)) from exc
    result.write_csv(os.path.join(out, "sweep.csv"))
    dump_json(result.to_dict(), os.path.join(out, "sweep.json"))
    dump_json(result.correlation_summary(), os.path.join(out, "correlations.json"))
    return EXIT_OK


def cmd_hpo(run: Run, out: str) -> int:
    try:
        return _hpo(run, out)
    except RuntimeError as exc:
        raise DivergedError(str(exc)) from exc


def _hpo(run: Run, out: str) -> int:
    if run.compare_repeats is not None:
        summary = sha.compare_pruning(run.spec, run.dataset, run.hp_space, run.sha, run.compare_repeats, run.seed)
        dump_json(summary, os.path.join(out, "comparison.json"))
        return EXIT_OK
    result = sha.run_sha(run.spec, run.dataset, run.hp_space, run.sha, run.seed)
    result.write_events(os.path.join(out, "events.jsonl"))
    dump_json(result.summary(), os.path.join(out, "summary.json"))
    return EXIT_OK


def cmd_ntk_drift(run: Run, out: str) -> int:
    rows, result = ex.ntk_drift(run.spec, run.dataset, run.train, run.probe_size)
    with open(os.path.join(out, "drift.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "drift"])
        for step, drift in rows:
            writer.writerow([step, fmt(drift)])
    if result.diverged:
        raise DivergedError(f"training diverged at step {result.diverged_step}")
    return EXIT_OK


COMMANDS = {
    "train": (("train",), "train one model and write snapshots and parameters"),
    "tic": (("tic",), "estimate the TIC bias of saved parameters"),
    "sweep": (("sweep", "tic"), "random-search sweep with bias/gap correlations"),
    "hpo": (("sha",), "successive halving, or a pruning-metric comparison"),
    "ntk-drift": (("train", "ntk"), "relative change of the empirical NTK during training"),
}
ALIASES = {"tic": ["estimate"], "sweep": ["correlate"], "hpo": ["prune"], "ntk-drift": ["diagnose"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, aliases=ALIASES.get(name, []), help=help_text)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory (must be new or empty)")
        if name == "tic":
            p.add_argument("--params", help="parameter vector saved by the train command (.npy)")
    return parser


def _canonical(command: str) -> str:
    for name, aliases in ALIASES.items():
        if command in aliases:
            return name
    return command


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = _canonical(args.command)
    try:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: {exc}") from exc
        run = Run(cfg, COMMANDS[command][0])
        out = _prepare_output(args.out, run)
        if command == "train":
            return cmd_train(run, out)
        if command == "tic":
            return cmd_tic(run, out, args.params)
        if command == "sweep":
            return cmd_sweep(run, out)
        if command == "hpo":
            return cmd_hpo(run, out)
        return cmd_ntk_drift(run, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except cv.ResourceCapError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return EXIT_CAP
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
