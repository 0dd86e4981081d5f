"""Evaluation bench: metric oracles, robustness expansion, response
classification, and the sweep harness."""

import csv
import json
import os

import numpy as np
import pytest

from voltrack import evalbench, synthdata
from voltrack.errors import ContractError
from voltrack.volgeom import Lesion


def make_result(true_center, pred, radius=4.0, pair_id="p", direction="ab"):
    pair = evalbench.DirectedPair(pair_id, direction, "t", "s",
                                  Lesion((0.0, 0.0, 0.0), radius),
                                  Lesion(tuple(true_center), radius))
    return evalbench.PairResult(pair, None if pred is None else tuple(pred), 0.01)


class TestMetrics:
    def test_345_triangle(self):
        res = make_result((0, 0, 0), (0, 3, 4), radius=6.0)
        assert res.dist_mm == pytest.approx(5.0)
        assert evalbench.cpm([res], "radius") == 100.0

    def test_strict_boundary_is_a_miss(self):
        on_edge = make_result((0, 0, 0), (0, 0, 4), radius=4.0)
        inside = make_result((0, 0, 0), (0, 0, 3.999), radius=4.0)
        assert evalbench.cpm([on_edge]) == 0.0
        assert evalbench.cpm([inside]) == 100.0

    def test_min10_rule(self):
        res = make_result((0, 0, 0), (0, 0, 9.0), radius=20.0)
        assert evalbench.cpm([res], "radius") == 100.0
        assert evalbench.cpm([res], "min10") == 100.0
        far = make_result((0, 0, 0), (0, 0, 11.0), radius=20.0)
        assert evalbench.cpm([far], "min10") == 0.0
        with pytest.raises(ContractError):
            evalbench.cpm([res], "radius5")

    def test_failed_pair_is_miss_but_excluded_from_med(self):
        ok = make_result((0, 0, 0), (0, 0, 2.0))
        bad = make_result((0, 0, 0), None)
        assert evalbench.cpm([ok, bad]) == 50.0
        stats = evalbench.med([ok, bad])
        assert stats["med"] == (2.0, 0.0)
        assert evalbench.med([bad]) is None
        assert evalbench.cpm([]) is None

    def test_oracle_equivalence_on_randomized_pairs(self):
        rng = np.random.default_rng(0)
        results = []
        for i in range(200):
            true = rng.uniform(0, 50, 3)
            pred = true + rng.normal(0, 4, 3)
            radius = rng.uniform(2, 15)
            results.append(make_result(true, pred, radius, f"p{i}"))
        # brute-force recomputation straight from the definitions
        dists = [np.linalg.norm(np.asarray(r.pred_mm)
                                - np.asarray(r.pair.lesion_s.center))
                 for r in results]
        radii = [r.pair.lesion_s.radius for r in results]
        want_cpm = 100.0 * np.mean([d < r for d, r in zip(dists, radii)])
        want_cpm10 = 100.0 * np.mean(
            [d < min(r, 10.0) for d, r in zip(dists, radii)])
        assert evalbench.cpm(results, "radius") == want_cpm
        assert evalbench.cpm(results, "min10") == want_cpm10
        stats = evalbench.med(results)
        assert stats["med"][0] == pytest.approx(np.mean(dists), abs=1e-12)
        assert stats["med"][1] == pytest.approx(np.std(dists), abs=1e-12)
        for key, ax in (("med_z", 0), ("med_y", 1), ("med_x", 2)):
            per = [abs(r.pred_mm[ax] - r.pair.lesion_s.center[ax]) for r in results]
            assert stats[key][0] == pytest.approx(np.mean(per), abs=1e-12)


class TestRobustness:
    def test_exactly_ten_fold_with_bounded_shifts(self):
        pairs = [make_result((0, 0, 0), (0, 0, 0), radius=4.0, pair_id=f"p{i}").pair
                 for i in range(8)]
        expanded = evalbench.robustness_expand(pairs, np.random.default_rng(1))
        assert len(expanded) == 10 * len(pairs)
        for p in expanded:
            shift = np.linalg.norm(np.asarray(p.lesion_t.center))
            assert shift <= 0.25 * p.lesion_t.radius + 1e-12
        originals = [p for p in expanded if p.init_index == 0]
        assert len(originals) == len(pairs)
        for p in originals:
            assert p.lesion_t.center == (0.0, 0.0, 0.0)


class TestResponse:
    def test_thresholds_and_boundaries(self):
        assert evalbench.response_classify(10.0, 7.0) == "partial_response"
        assert evalbench.response_classify(10.0, 7.01) == "stable"
        assert evalbench.response_classify(10.0, 12.0) == "progressive"
        assert evalbench.response_classify(10.0, 11.99) == "stable"
        with pytest.raises(ContractError):
            evalbench.response_classify(0.0, 5.0)

    def test_growth_direction(self):
        assert evalbench.growth_correct(10.0, 12.0, 11.0)
        assert evalbench.growth_correct(10.0, 8.0, 9.0)
        assert not evalbench.growth_correct(10.0, 12.0, 9.0)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("eval_ds"))
    spec = synthdata.PhantomSpec(seed=21)
    return synthdata.generate_dataset(spec, out, 3, seed=21)


class TestRunEval:
    def test_oracle_stub_scores_perfectly(self, small_dataset, tmp_path):
        def oracle(pair, vol_t, vol_s, transform):
            return pair.lesion_s.center, 0.0

        report_path = str(tmp_path / "report.json")
        csv_path = str(tmp_path / "pairs.csv")
        snap_dir = str(tmp_path / "snaps")
        report, results = evalbench.run_eval(
            None, small_dataset, track_fn=oracle, report_path=report_path,
            csv_path=csv_path, snapshot_dir=snap_dir)
        assert report.pair_count == 6   # 3 studies x both directions
        assert report.cpm_radius == 100.0
        assert report.med == (0.0, 0.0)
        with open(report_path) as f:
            assert json.load(f)["cpm_radius"] == 100.0
        with open(csv_path) as f:
            rows = list(csv.reader(f))
        assert rows[0][:3] == ["pair_id", "direction", "dist_mm"]
        assert len(rows) == 7
        snaps = os.listdir(snap_dir)
        assert len(snaps) == 6 and all(s.endswith(".pgm") for s in snaps)

    def test_constant_offset_stub_measured_exactly(self, small_dataset):
        def stub(pair, vol_t, vol_s, transform):
            c = np.asarray(pair.lesion_s.center)
            return tuple(c + [0.0, 6.0, 8.0]), 0.0

        report, _ = evalbench.run_eval(None, small_dataset, track_fn=stub)
        assert report.med[0] == pytest.approx(10.0, abs=1e-9)
        assert report.med[1] == pytest.approx(0.0, abs=1e-9)
        assert report.cpm10 == 0.0

    def test_raising_stub_counts_as_miss(self, small_dataset):
        def flaky(pair, vol_t, vol_s, transform):
            if pair.direction == "ba":
                raise RuntimeError("boom")
            return pair.lesion_s.center, 0.0

        report, results = evalbench.run_eval(None, small_dataset, track_fn=flaky)
        assert report.cpm_radius == 50.0
        errs = [r for r in results if r.error]
        assert len(errs) == 3 and "boom" in errs[0].error

    def test_robustness_expands_pairs(self, small_dataset):
        def oracle(pair, vol_t, vol_s, transform):
            return pair.lesion_s.center, 0.0

        report, _ = evalbench.run_eval(None, small_dataset, track_fn=oracle,
                                       robustness=True)
        assert report.pair_count == 60

    def test_empty_manifest_rejected(self, tmp_path):
        bad = tmp_path / "manifest.json"
        bad.write_text("[]")
        with pytest.raises(ContractError):
            evalbench.run_eval(None, str(bad))
