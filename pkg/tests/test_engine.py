import random

import pytest

from cfagent.engine import (
    CandidateCF,
    CandidateConfig,
    EmptyGrid,
    NoCandidates,
    Region,
    SelectionPolicy,
    default_region,
    enumerate_candidates,
    select_best,
    strength_grids,
)
from cfagent.metrics import MetricBundle
from cfagent.stubs import random_scene
from oracles import brute_classifier_score, brute_sip, brute_ssim, oracle_select


def _cand(index: int, cpg: float, sip: float, ssim: float = 0.9, lam: float = 1.0) -> CandidateCF:
    return CandidateCF(
        config=CandidateConfig(editor="edit_a", args={"strength": 0.5}, index=index),
        image=f"{index:02x}" * 8,
        metrics=MetricBundle(cpg=cpg, flipped=cpg > 0.3, ssim=ssim, sip=sip),
        score=cpg - lam * sip,
        score_factual=0.9,
        score_cf=0.9 - cpg,
    )


class TestEnumerate:
    def test_round_robin_truncation(self):
        grids = strength_grids(["edit_a", "edit_b"], [0.4, 0.7, 1.0])
        configs = enumerate_candidates(["edit_a", "edit_b"], grids, budget=5)
        assert [(c.editor, c.args["strength"]) for c in configs] == [
            ("edit_a", 0.4), ("edit_b", 0.4),
            ("edit_a", 0.7), ("edit_b", 0.7),
            ("edit_a", 1.0),
        ]
        assert [c.index for c in configs] == [0, 1, 2, 3, 4]

    def test_no_padding_beyond_grid(self):
        grids = strength_grids(["edit_a"], [0.3, 0.9])
        configs = enumerate_candidates(["edit_a"], grids, budget=5)
        assert len(configs) == 2

    def test_empty_grid(self):
        with pytest.raises(EmptyGrid):
            enumerate_candidates(["edit_a"], {"edit_a": []}, budget=5)
        with pytest.raises(EmptyGrid):
            enumerate_candidates([], {}, budget=5)

    def test_budget_and_uniqueness_over_random_grids(self):
        rng = random.Random(7)
        for _ in range(200):
            editors = [f"e{i}" for i in range(rng.randint(1, 4))]
            grids = {e: [{"strength": rng.random()} for _ in range(rng.randint(1, 6))]
                     for e in editors}
            budget = rng.randint(1, 5)
            configs = enumerate_candidates(editors, grids, budget)
            assert 1 <= len(configs) <= 5
            assert len(configs) <= budget
            assert [c.index for c in configs] == list(range(len(configs)))


class TestSelectBest:
    def test_direct_arithmetic(self):
        a = _cand(0, cpg=0.5, sip=0.10)
        b = _cand(1, cpg=0.5, sip=0.05)
        c = _cand(2, cpg=0.3, sip=0.01)
        assert select_best([a, b, c], SelectionPolicy()) is b

    def test_ssim_tie_break(self):
        a = _cand(0, cpg=0.5, sip=0.1, ssim=0.8)
        b = _cand(1, cpg=0.5, sip=0.1, ssim=0.9)
        assert select_best([a, b], SelectionPolicy()) is b

    def test_index_tie_break(self):
        a = _cand(0, cpg=0.5, sip=0.1, ssim=0.9)
        b = _cand(1, cpg=0.5, sip=0.1, ssim=0.9)
        assert select_best([a, b], SelectionPolicy()) is a

    def test_empty(self):
        with pytest.raises(NoCandidates):
            select_best([], SelectionPolicy())

    def test_matches_exhaustive_oracle_random(self):
        rng = random.Random(11)
        for _ in range(300):
            cands = [_cand(i, cpg=round(rng.random(), 2), sip=round(rng.random() / 4, 2),
                           ssim=round(rng.random(), 2)) for i in range(rng.randint(1, 5))]
            assert select_best(cands, SelectionPolicy()) is oracle_select(cands, 1.0)

    def test_policy_validation(self):
        with pytest.raises(Exception):
            SelectionPolicy(budget=0)
        with pytest.raises(Exception):
            SelectionPolicy(budget=6)
        with pytest.raises(Exception):
            SelectionPolicy(lambda_sip=-1)


class TestDefaultRegion:
    def test_centered_quarter_disk(self):
        region = default_region(64, 64)
        assert region == Region(cx=32, cy=32, r=16)


class TestRunCandidate:
    def test_strength_zero_identity_propagates(self, runtime):
        scene = random_scene(3)
        les = scene.lesion
        result = runtime.dispatcher.invoke("gen_image", {
            "seed": scene.seed, "width": 64, "height": 64,
            "lesion_cx": les.cx, "lesion_cy": les.cy, "lesion_r": les.r, "lesion_a": les.a,
        })
        factual = result.payload["image"][1:]
        cfg = CandidateConfig(editor="edit_a", args={"strength": 0.0}, index=0)
        cand = runtime.engine.run_candidate(factual, cfg, Region(les.cx, les.cy, les.r))
        assert cand.image == factual
        assert cand.metrics.cpg == 0.0
        assert cand.metrics.sip == 0.0
        assert cand.metrics.ssim == pytest.approx(1.0, abs=1e-9)

    def test_full_strength_flips_strong_lesion(self, runtime):
        scene = random_scene(8)
        les = scene.lesion
        result = runtime.dispatcher.invoke("gen_image", {
            "seed": scene.seed, "width": scene.width, "height": scene.height,
            "lesion_cx": les.cx, "lesion_cy": les.cy, "lesion_r": les.r, "lesion_a": les.a,
            "g0": scene.g0, "g1": scene.g1, "noise": scene.noise_amp,
        })
        factual = result.payload["image"][1:]
        cfg = CandidateConfig(editor="edit_a", args={"strength": 1.0}, index=0)
        cand = runtime.engine.run_candidate(factual, cfg, Region(les.cx, les.cy, les.r))
        assert cand.metrics.flipped is True

    def test_metrics_recomputable_from_artifacts(self, runtime):
        scene = random_scene(21)
        les = scene.lesion
        result = runtime.dispatcher.invoke("gen_image", {
            "seed": scene.seed, "width": scene.width, "height": scene.height,
            "lesion_cx": les.cx, "lesion_cy": les.cy, "lesion_r": les.r, "lesion_a": les.a,
        })
        factual = result.payload["image"][1:]
        cfg = CandidateConfig(editor="edit_a", args={"strength": 0.7}, index=2)
        cand = runtime.engine.run_candidate(factual, cfg, Region(les.cx, les.cy, les.r))
        fa = runtime.store.get(factual).pixels
        cf = runtime.store.get(cand.image).pixels
        assert cand.metrics.sip == pytest.approx(brute_sip(fa, cf), abs=1e-12)
        assert cand.metrics.ssim == pytest.approx(brute_ssim(fa, cf), abs=1e-9)
        assert cand.score_factual == pytest.approx(brute_classifier_score(fa), abs=1e-9)
        assert cand.score_cf == pytest.approx(brute_classifier_score(cf), abs=1e-9)
        assert cand.score == pytest.approx(cand.metrics.cpg - cand.metrics.sip, abs=1e-12)


class TestWorkflow:
    def _factual(self, runtime, seed: int) -> tuple[str, Region]:
        scene = random_scene(seed)
        les = scene.lesion
        result = runtime.dispatcher.invoke("gen_image", {
            "seed": scene.seed, "width": scene.width, "height": scene.height,
            "lesion_cx": les.cx, "lesion_cy": les.cy, "lesion_r": les.r, "lesion_a": les.a,
            "g0": scene.g0, "g1": scene.g1, "noise": scene.noise_amp,
        })
        return result.payload["image"][1:], Region(les.cx, les.cy, les.r)

    def test_budget_exactly_five_editor_calls(self, runtime):
        factual, region = self._factual(runtime, 31)
        before_a = runtime.dispatcher.probe_server("edit_a", "__stats__")["result"]["calls"]
        before_b = runtime.dispatcher.probe_server("edit_b", "__stats__")["result"]["calls"]
        runtime.engine.run_cf_workflow(factual, "remove it", region=region)
        after_a = runtime.dispatcher.probe_server("edit_a", "__stats__")["result"]["calls"]
        after_b = runtime.dispatcher.probe_server("edit_b", "__stats__")["result"]["calls"]
        assert (after_a - before_a) + (after_b - before_b) == 5

    def test_fixture_flips_and_preserves_identity(self, runtime):
        factual, region = self._factual(runtime, 31)
        report = runtime.engine.run_cf_workflow(factual, "remove it", region=region)
        assert report.best.metrics.flipped is True
        assert report.best.metrics.sip < 0.25
        assert len(report.all) == 5

    def test_events_emitted_in_index_order(self, runtime):
        factual, region = self._factual(runtime, 44)
        events = []
        runtime.engine.run_cf_workflow(factual, "remove it", region=region,
                                       emit=lambda kind, body: events.append((kind, body)))
        assert [b["index"] for _, b in events] == [0, 1, 2, 3, 4]
        assert all(kind == "candidate_scored" for kind, _ in events)

    def test_selection_matches_oracle_and_dominates(self, runtime):
        factual, region = self._factual(runtime, 52)
        report = runtime.engine.run_cf_workflow(factual, "remove it", region=region)
        oracle_best = oracle_select(list(report.all), 1.0)
        assert report.best.image == oracle_best.image
        for cand in report.all:
            assert report.best.score >= cand.score

    def test_difference_map_consistency(self, runtime):
        factual, region = self._factual(runtime, 63)
        report = runtime.engine.run_cf_workflow(factual, "remove it", region=region)
        dm = runtime.store.get(report.difference_map)
        fa = runtime.store.get(factual).pixels.astype("float64")
        cf = runtime.store.get(report.best.image).pixels.astype("float64")
        import numpy as np

        assert np.allclose(dm.pixels, np.abs(fa - cf).astype("float32"), atol=0)

    def test_deterministic_best_across_runs(self, runtime):
        factual, region = self._factual(runtime, 77)
        ids = [runtime.engine.run_cf_workflow(factual, "p", region=region).best.image
               for _ in range(2)]
        assert ids[0] == ids[1]
