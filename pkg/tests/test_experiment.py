"""Harness contracts: plan parsing, report shape, determinism, aggregation."""

import csv
import json
import math
import os

import numpy as np
import pytest

from inpaintguard.dataset import gen_dataset
from inpaintguard.errors import ConfigError
from inpaintguard.experiment import (
    CSV_COLUMNS,
    ExperimentPlan,
    MetricRow,
    plan_from_json,
    run_experiment,
    summarize,
    tap_pass,
)
from inpaintguard.masks import all_keep_mask

PLAN_DOC = """
{
  "dataset": "%s",
  "images": [0, 1],
  "masks": ["bbox"],
  "prompts": ["", "disk"],
  "objectives": ["attn"],
  "sampler": {"steps": 5, "guidance": 2.0},
  "attack": {"iters": 2, "alpha0": 0.03},
  "seed": 13
}
"""


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    gen_dataset(2, 9, out)
    return str(out)


def small_plan(data_dir, **overrides):
    base = dict(dataset=data_dir, images=[0, 1], masks=["bbox"],
                prompts=["", "disk"], objectives=["attn"],
                steps=5, guidance=2.0, iters=2, seed=13)
    base.update(overrides)
    return ExperimentPlan(**base)


class TestPlanParsing:
    def test_document_round_trip(self, data_dir):
        plan = plan_from_json(PLAN_DOC % data_dir)
        assert plan.images == [0, 1]
        assert plan.steps == 5 and plan.guidance == 2.0
        assert plan.iters == 2 and plan.alpha0 == 0.03
        assert plan.eta == 0.06 and plan.rho == 1.2  # untouched defaults
        assert plan.stages == "two"
        assert plan.row_count() == 4

    def test_defaults_match_attack_and_sampler(self, data_dir):
        plan = plan_from_json(json.dumps({
            "dataset": data_dir, "images": [0], "masks": ["seg"],
            "prompts": [""], "objectives": ["attn"],
        }))
        assert (plan.eta, plan.alpha0, plan.iters) == (0.06, 0.03, 250)
        assert (plan.steps, plan.guidance) == (50, 7.5)

    def test_unknown_keys_fail_closed(self, data_dir):
        good = json.loads(PLAN_DOC % data_dir)
        for poison in ({"budget": 3}, {"sampler": {"steps": 5, "cadence": 1}},
                       {"attack": {"strength": 2}}):
            doc = {**good, **poison}
            with pytest.raises(ConfigError, match="unknown plan key"):
                plan_from_json(json.dumps(doc))

    def test_missing_required_key(self, data_dir):
        doc = json.loads(PLAN_DOC % data_dir)
        del doc["prompts"]
        with pytest.raises(ConfigError, match="prompts"):
            plan_from_json(json.dumps(doc))

    def test_empty_prompt_list_rejected(self, data_dir):
        with pytest.raises(ConfigError):
            small_plan(data_dir, prompts=[])

    def test_bad_values_rejected(self, data_dir):
        with pytest.raises(ConfigError):
            small_plan(data_dir, masks=["oval"])
        with pytest.raises(ConfigError):
            small_plan(data_dir, objectives=["fid"])
        with pytest.raises(ConfigError):
            small_plan(data_dir, stages="three")
        with pytest.raises(ConfigError):
            small_plan(data_dir, images=[0, 0])

    def test_not_json_or_not_object(self):
        with pytest.raises(ConfigError):
            plan_from_json("{nope")
        with pytest.raises(ConfigError):
            plan_from_json("[1, 2]")


class TestMetricRow:
    def test_rejects_non_finite(self):
        with pytest.raises(ConfigError, match="psnr_adv_db"):
            MetricRow(0, "seg", "inside", "", "attn", "two",
                      math.inf, 0.1, 0.1, 0.1, 0.1)


class TestSummarize:
    def rows(self):
        mk = lambda i, obj, v: MetricRow(i, "seg", "inside", "", obj, "two",
                                         30.0 + v, v, v * 2, v * 3, v * 4)
        return [mk(0, "attn", 0.1), mk(1, "attn", 0.3), mk(0, "noise-min", 0.5)]

    def test_group_means(self):
        s = summarize(self.rows(), [], 3)
        attn = s["by_objective"]["attn"]
        assert attn["attention_divergence"]["mean"] == pytest.approx(0.2)
        assert attn["attention_divergence"]["min"] == 0.1
        assert attn["attention_divergence"]["max"] == 0.3
        assert s["by_objective"]["noise-min"]["hole_deviation_vs_clean"]["mean"] == 1.0
        assert s["row_count"] == 3 and s["expected_rows"] == 3

    def test_order_insensitive_bitwise(self):
        r = self.rows()
        assert summarize(r, [], 3) == summarize(r[::-1], [], 3)


@pytest.fixture(scope="module")
def report(data_dir, std_model, tmp_path_factory):
    out = tmp_path_factory.mktemp("rep")
    plan = small_plan(data_dir)
    summary = run_experiment(plan, std_model, str(out))
    return plan, str(out), summary


class TestRunExperiment:
    def read_csv(self, out_dir):
        with open(os.path.join(out_dir, "report.csv"), newline="") as f:
            return list(csv.reader(f))

    def test_row_count_is_cross_product(self, report):
        plan, out_dir, summary = report
        rows = self.read_csv(out_dir)
        assert rows[0] == list(CSV_COLUMNS)
        assert len(rows) - 1 == plan.row_count() == summary["row_count"]
        assert summary["failures"] == []

    def test_psnr_respects_eta_floor(self, report):
        _, out_dir, _ = report
        floor = -20.0 * math.log10(0.06)
        col = CSV_COLUMNS.index("psnr_adv_db")
        for row in self.read_csv(out_dir)[1:]:
            assert float(row[col]) >= floor

    def test_delta_cached_per_image_and_objective(self, report):
        # same image and objective across prompts reuse one perturbation
        _, out_dir, _ = report
        ic, pc = CSV_COLUMNS.index("image_id"), CSV_COLUMNS.index("psnr_adv_db")
        seen = {}
        for row in self.read_csv(out_dir)[1:]:
            seen.setdefault(row[ic], set()).add(row[pc])
        for vals in seen.values():
            assert len(vals) == 1

    def test_mask_class_recorded(self, report):
        _, out_dir, _ = report
        col = CSV_COLUMNS.index("mask_class")
        assert {row[col] for row in self.read_csv(out_dir)[1:]} == {"inside"}

    def test_summary_means_recomputed_independently(self, report):
        # independent aggregation pass over the CSV must agree
        _, out_dir, summary = report
        rows = self.read_csv(out_dir)
        header, body = rows[0], rows[1:]
        oc = header.index("objective")
        for objective, stats in summary["by_objective"].items():
            group = [r for r in body if r[oc] == objective]
            for metric, want in stats.items():
                vals = [float(r[header.index(metric)]) for r in group]
                assert want["mean"] == pytest.approx(sum(vals) / len(vals), rel=1e-12)
                assert want["min"] == pytest.approx(min(vals), rel=1e-15)
                assert want["max"] == pytest.approx(max(vals), rel=1e-15)

    def test_deterministic_and_order_independent(self, data_dir, std_model,
                                                 report, tmp_path):
        plan, out_dir, _ = report
        shuffled = list(np.random.default_rng(5).permutation(plan.row_count()))
        run_experiment(small_plan(data_dir), std_model, str(tmp_path),
                       order=[int(i) for i in shuffled])
        for name in ("report.csv", "summary.json"):
            with open(os.path.join(out_dir, name), "rb") as f:
                first = f.read()
            with open(os.path.join(tmp_path, name), "rb") as f:
                second = f.read()
            assert first == second, name

    def test_bad_order_rejected(self, data_dir, std_model, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment(small_plan(data_dir), std_model, str(tmp_path),
                           order=[0, 0, 1, 2])

    def test_missing_image_rejected(self, data_dir, std_model, tmp_path):
        plan = small_plan(data_dir, images=[0, 7])
        with pytest.raises(ConfigError, match="missing image"):
            run_experiment(plan, std_model, str(tmp_path))

    def test_row_failures_recorded_and_run_continues(self, data_dir, std_model,
                                                     tmp_path):
        plan = small_plan(data_dir, prompts=["", "99"], images=[0])
        summary = run_experiment(plan, std_model, str(tmp_path))
        assert summary["expected_rows"] == 2
        assert summary["row_count"] == 1  # the valid prompt still ran
        assert len(summary["failures"]) == 1
        failure = summary["failures"][0]
        assert failure["prompt"] == "99"
        assert "ConfigError" in failure["error"]
        rows = self.read_csv(str(tmp_path))
        assert len(rows) - 1 == 1


class TestTapPass:
    def test_shapes_and_determinism(self, std_model):
        rng = np.random.default_rng(0)
        x = rng.random((3, 32, 32))
        eps = rng.standard_normal((1, 4, 16, 16))
        tokens = np.array([1, 1, 1, 1])
        mask = all_keep_mask((32, 32))
        a = tap_pass(std_model, x, mask, tokens, eps)
        b = tap_pass(std_model, x, mask, tokens, eps)
        assert len(a.layers) == 4
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.cross_q.data, lb.cross_q.data)


class TestMakeMask:
    def load_sample(self, data_dir):
        from inpaintguard.dataset import load_dataset
        return load_dataset(data_dir)[0]

    def test_every_generator_yields_a_mask(self, data_dir):
        from inpaintguard.experiment import MASK_GENERATORS, make_mask
        from inpaintguard.masks import MaskSpec
        sample = self.load_sample(data_dir)
        plan = small_plan(data_dir)
        for gen in MASK_GENERATORS:
            mask = make_mask(sample, gen, plan)
            assert isinstance(mask, MaskSpec)
            assert mask.shape == sample.seg.shape
            assert mask.hole_count() > 0

    def test_shifted_is_deterministic_per_plan_seed(self, data_dir):
        from inpaintguard.experiment import make_mask
        sample = self.load_sample(data_dir)
        plan = small_plan(data_dir)
        a = make_mask(sample, "shifted", plan)
        b = make_mask(sample, "shifted", plan)
        assert np.array_equal(a.grid, b.grid)
        other = make_mask(sample, "shifted", small_plan(data_dir, seed=77))
        assert not np.array_equal(a.grid, other.grid)

    def test_unknown_generator_rejected(self, data_dir):
        from inpaintguard.experiment import make_mask
        sample = self.load_sample(data_dir)
        with pytest.raises(ConfigError):
            make_mask(sample, "oval", small_plan(data_dir))
