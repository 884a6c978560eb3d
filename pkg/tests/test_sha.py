import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ticnet.experiments import HpSpace, make_blobs
from ticnet.network import NetworkSpec, mean_loss
from ticnet.sha import Metric, ShaConfig, Status, compare_pruning, full_training_ranking, rank_key, run_sha

SPEC = NetworkSpec(4, (8,), 3)
DATA = make_blobs(3, 4, 150, 2.0, seed=0)
SPACE = HpSpace(eta=(1e-3, 0.3), gamma=(0.0, 0.9), batch_size=16)


def small_config(**kw):
    return ShaConfig(**{**dict(num_trials=8, reduction_factor=2, min_resource=3, num_rungs=4), **kw})


class TestShaConfig:
    def test_counts(self):
        config = ShaConfig(num_trials=8, reduction_factor=2, num_rungs=3)
        assert config.survivor_counts() == [8, 4, 2, 1]

    def test_resources(self):
        config = ShaConfig(num_trials=27, reduction_factor=3, min_resource=10, num_rungs=4)
        assert [config.resource(r) for r in range(4)] == [10, 30, 90, 270]
        assert config.max_resource == 270

    def test_closed_form(self):
        config = ShaConfig(num_trials=9, reduction_factor=3, min_resource=4, num_rungs=3)
        assert config.closed_form_steps() == 9 * 4 + 3 * 8 + 1 * 24

    @pytest.mark.parametrize("kw", [dict(num_trials=1), dict(reduction_factor=1), dict(min_resource=0),
                                    dict(num_rungs=0), dict(num_trials=8, reduction_factor=3, num_rungs=4)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ShaConfig(**kw)


def test_rank_key_order():
    keys = [rank_key(0, 2.0, None), rank_key(1, None, 5), rank_key(2, float("nan"), None),
            rank_key(3, 1.0, None), rank_key(4, None, 9), rank_key(5, 1.0, None)]
    assert [k[2] for k in sorted(keys)] == [3, 5, 0, 2, 4, 1]


class TestRunSha:
    def test_rung_sizes_and_steps(self):
        config = small_config()
        result = run_sha(SPEC, DATA, SPACE, config, seed=1)
        assert result.rung_sizes == [8, 4, 2, 1]
        assert not any(r.status is Status.DIVERGED for r in result.records)
        assert result.steps_consumed == config.closed_form_steps()

    def test_pruned_never_overrun(self):
        config = small_config()
        result = run_sha(SPEC, DATA, SPACE, config, seed=2)
        for rec in result.records:
            if rec.status is Status.PRUNED:
                assert rec.steps_consumed == config.resource(rec.pruned_rung)
                assert max(m[0] for m in rec.rung_metrics) == rec.pruned_rung
            resources = [m[1] for m in rec.rung_metrics]
            assert resources == sorted(set(resources))
        winner = result.records[result.winner]
        assert winner.status is Status.COMPLETED and winner.steps_consumed == config.max_resource

    def test_oracle_selects_best(self):
        config = small_config(metric=Metric.ORACLE)
        for seed in range(3):
            order, finals = full_training_ranking(SPEC, DATA, SPACE, config, seed)
            result = run_sha(SPEC, DATA, SPACE, config, seed, oracle=lambda t, rung, p: finals[t])
            assert result.winner == order[0]

    def test_monotone_transform(self):
        def events(transform):
            config = small_config(metric=Metric.ORACLE)
            oracle = lambda t, rung, p: transform(mean_loss(SPEC, p, DATA, "validation"))  # noqa: E731
            return [(e["rung"], e["trial_id"], e["action"]) for e in run_sha(SPEC, DATA, SPACE, config, 4, oracle).events]

        base = events(lambda v: v)
        assert events(math.exp) == base
        assert events(lambda v: v ** 3 + 7) == base

    def test_validation_metric_matches_oracle_on_validation(self):
        plain = run_sha(SPEC, DATA, SPACE, small_config(), seed=5)
        oracle = run_sha(SPEC, DATA, SPACE, small_config(metric=Metric.ORACLE), seed=5,
                         oracle=lambda t, rung, p: mean_loss(SPEC, p, DATA, "validation"))
        assert plain.events == oracle.events

    def test_tic_metric_runs(self):
        result = run_sha(SPEC, DATA, SPACE, small_config(metric=Metric.TIC_SCORE), seed=6)
        assert all(math.isfinite(m[2]) for r in result.records for m in r.rung_metrics)

    def test_diverged_rank_last(self):
        space = HpSpace(eta=(1e-2, 1e4), gamma=(0, 0), batch_size=16)
        result = run_sha(SPEC, DATA, space, small_config(), seed=0)
        diverged = [r for r in result.records if r.status is Status.DIVERGED]
        assert diverged and result.records[result.winner].status is Status.COMPLETED
        first_rung = [e for e in result.events if e["rung"] == 0]
        tail = first_rung[-len(diverged):]
        assert {e["trial_id"] for e in tail} == {r.trial_id for r in diverged}
        assert all(e["metric"] is None for e in tail)

    def test_all_diverged(self):
        space = HpSpace(eta=(1e7, 1e8), gamma=(0, 0), batch_size=16)
        with pytest.raises(RuntimeError):
            run_sha(SPEC, DATA, space, small_config(), seed=0)

    def test_oracle_required(self):
        with pytest.raises(ValueError):
            run_sha(SPEC, DATA, SPACE, small_config(metric=Metric.ORACLE))

    def test_event_log_replay(self, tmp_path):
        config = small_config()
        result = run_sha(SPEC, DATA, SPACE, config, seed=7)
        path = tmp_path / "events.jsonl"
        result.write_events(path)
        events = [json.loads(line) for line in path.read_text().splitlines()]
        alive = set(range(config.num_trials))
        for rung in range(config.num_rungs):
            here = [e for e in events if e["rung"] == rung]
            assert {e["trial_id"] for e in here} == alive
            assert all(e["resource"] == config.resource(rung) for e in here)
            alive = {e["trial_id"] for e in here if e["action"] == "advance"}
        assert alive == {result.winner}


class TestComparePruning:
    def test_degenerate_two_trials(self):
        space = HpSpace(eta=(1e-2, 1e4), gamma=(0, 0), batch_size=16)
        config = ShaConfig(num_trials=2, reduction_factor=2, min_resource=4, num_rungs=2)
        # with seed 3 the first trial diverges and the second does not
        summary = compare_pruning(SPEC, DATA, space, config, 1, seed=3)
        (repeat,) = summary["repeats"]
        assert repeat["true_order"] == [1, 0]
        for arm in ("validation_loss", "tic_score", "oracle"):
            assert repeat[arm]["winner"] == 1 and repeat[arm]["true_rank"] == 1

    def test_histograms(self):
        config = ShaConfig(num_trials=4, reduction_factor=2, min_resource=3, num_rungs=2)
        summary = compare_pruning(SPEC, DATA, replace(SPACE), config, 3, seed=1)
        for arm, hist in summary["rank_histograms"].items():
            assert sum(hist.values()) == 3
            assert list(hist) == ["1", "2", "3", "4"]
        assert summary["rank_histograms"]["oracle"]["1"] == 3
        json.dumps(summary)

    def test_repeats_positive(self):
        with pytest.raises(ValueError):
            compare_pruning(SPEC, DATA, SPACE, small_config(), 0)
