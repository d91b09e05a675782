"""Generate-test-select: enumerate candidate edit configurations, fan out
generation and scoring, and deterministically pick the best candidate.

The selection objective is score = CPG - lambda * SIP (prediction gain traded
against identity loss), ties broken by higher SSIM, then lower candidate
index, so scheduling order never changes the outcome. Editor invocations per
workflow never exceed the policy budget (hard cap 5).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable

from . import metrics
from .core import ArtifactStore, ImageArtifact
from .toolwire import Dispatcher

MAX_BUDGET = 5
DEFAULT_STRENGTH_GRID = (0.4, 0.7, 1.0)
DEFAULT_EDITORS = ("edit_a", "edit_b")


class EngineError(Exception):
    code = "engine_error"


class EmptyGrid(EngineError):
    code = "empty_grid"


class NoCandidates(EngineError):
    code = "no_candidates"


class EditorFailed(EngineError):
    code = "editor_failed"


class ClassifierFailed(EngineError):
    code = "classifier_failed"


@dataclass(frozen=True)
class SelectionPolicy:
    """lambda_sip weights identity preservation against prediction gain."""

    lambda_sip: float = 1.0
    threshold: float = 0.5
    budget: int = MAX_BUDGET

    def __post_init__(self) -> None:
        if not (1 <= self.budget <= MAX_BUDGET):
            raise EngineError(f"budget must be in [1,{MAX_BUDGET}], got {self.budget}")
        if self.lambda_sip < 0.0:
            raise EngineError("lambda_sip must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {"budget": self.budget, "lambda": self.lambda_sip, "threshold": self.threshold}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "SelectionPolicy":
        return SelectionPolicy(
            lambda_sip=float(d.get("lambda", 1.0)),
            threshold=float(d.get("threshold", 0.5)),
            budget=int(d.get("budget", MAX_BUDGET)),
        )


@dataclass(frozen=True)
class Region:
    cx: int
    cy: int
    r: int

    def to_dict(self) -> dict[str, int]:
        return {"cx": self.cx, "cy": self.cy, "r": self.r}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "Region":
        return Region(cx=int(d["cx"]), cy=int(d["cy"]), r=int(d["r"]))


@dataclass(frozen=True)
class CandidateConfig:
    editor: str
    args: dict[str, Any]
    index: int

    def to_dict(self) -> dict[str, Any]:
        return {"args": dict(sorted(self.args.items())), "editor": self.editor, "index": self.index}


@dataclass(frozen=True)
class CandidateCF:
    config: CandidateConfig
    image: str  # artifact id of the edited image
    metrics: metrics.MetricBundle
    score: float
    score_factual: float
    score_cf: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "image": "@" + self.image,
            "metrics": self.metrics.to_dict(),
            "score": self.score,
            "score_cf": self.score_cf,
            "score_factual": self.score_factual,
        }


@dataclass(frozen=True)
class CFReport:
    factual: str
    prompt: str
    region: Region
    best: CandidateCF
    all: tuple[CandidateCF, ...]
    difference_map: str  # artifact id

    def to_dict(self) -> dict[str, Any]:
        return {
            "best": self.best.to_dict(),
            "candidates": [c.to_dict() for c in self.all],
            "difference_map": "@" + self.difference_map,
            "factual": "@" + self.factual,
            "prompt": self.prompt,
            "region": self.region.to_dict(),
        }


def default_region(width: int, height: int) -> Region:
    """Probe region used when neither the user nor a report supplied one:
    a centered disk a quarter of the short side. Editing "somewhere generic"
    is the stub analog of prompting an editor without pathology context."""
    return Region(cx=width // 2, cy=height // 2, r=max(1, min(width, height) // 4))


def enumerate_candidates(
    editors: list[str] | tuple[str, ...],
    grids: dict[str, list[dict[str, Any]]],
    budget: int,
) -> list[CandidateConfig]:
    """Round-robin across editors in their grid order, truncated to budget."""
    if not editors:
        raise EmptyGrid("no editors given")
    for editor in editors:
        if not grids.get(editor):
            raise EmptyGrid(f"editor {editor!r} has an empty grid")
    budget = min(budget, MAX_BUDGET)
    configs: list[CandidateConfig] = []
    depth = max(len(grids[e]) for e in editors)
    for rank in range(depth):
        for editor in editors:
            grid = grids[editor]
            if rank < len(grid):
                configs.append(CandidateConfig(editor=editor, args=dict(grid[rank]), index=len(configs)))
    del configs[budget:]
    return configs


def strength_grids(editors: tuple[str, ...] | list[str],
                   strengths: tuple[float, ...] | list[float] = DEFAULT_STRENGTH_GRID,
                   ) -> dict[str, list[dict[str, Any]]]:
    return {editor: [{"strength": s} for s in strengths] for editor in editors}


def select_best(candidates: list[CandidateCF], policy: SelectionPolicy) -> CandidateCF:
    """argmax of score; ties -> higher ssim, then lower config index."""
    if not candidates:
        raise NoCandidates("empty candidate list")
    return max(candidates, key=lambda c: (c.score, c.metrics.ssim, -c.config.index))


EventSink = Callable[[str, dict[str, Any]], None]


class CFEngine:
    """Runs candidate generation and scoring against the live tool registry."""

    def __init__(self, dispatcher: Dispatcher, store: ArtifactStore,
                 policy: SelectionPolicy | None = None, max_workers: int = MAX_BUDGET):
        self.dispatcher = dispatcher
        self.store = store
        self.policy = policy or SelectionPolicy()
        self.max_workers = max_workers

    def run_candidate(self, factual_id: str, config: CandidateConfig,
                      region: Region, policy: SelectionPolicy | None = None) -> CandidateCF:
        """Edit (with fallback), classify factual and CF, compute the bundle."""
        policy = policy or self.policy
        args = {
            "image": "@" + factual_id,
            "cx": region.cx, "cy": region.cy, "r": region.r,
            **config.args,
        }
        edited, served_by = self.dispatcher.invoke_with_fallback(config.editor, args)
        if not edited.ok:
            raise EditorFailed(f"candidate {config.index} ({config.editor}): {edited.error}")
        cf_ref = (edited.payload or {}).get("image")
        if not isinstance(cf_ref, str) or not cf_ref.startswith("@"):
            raise EditorFailed(f"candidate {config.index}: editor returned no image: {edited.payload!r}")
        cf_id = cf_ref[1:]

        score_factual = self._classify(factual_id)
        score_cf = score_factual if cf_id == factual_id else self._classify(cf_id)

        factual_img = self.store.get(factual_id)
        cf_img = self.store.get(cf_id)
        bundle = metrics.bundle(factual_img, cf_img, score_factual, score_cf, policy.threshold)
        score = bundle.cpg - policy.lambda_sip * bundle.sip
        return CandidateCF(
            config=replace(config, editor=served_by or config.editor),
            image=cf_id,
            metrics=bundle,
            score=score,
            score_factual=score_factual,
            score_cf=score_cf,
        )

    def _classify(self, artifact_id: str) -> float:
        result = self.dispatcher.invoke("classify", {"image": "@" + artifact_id})
        if not result.ok:
            raise ClassifierFailed(json.dumps(result.error, sort_keys=True))
        return float((result.payload or {})["score"])

    def run_cf_workflow(
        self,
        factual_id: str,
        prompt: str,
        region: Region | None = None,
        policy: SelectionPolicy | None = None,
        editors: tuple[str, ...] | list[str] = DEFAULT_EDITORS,
        grids: dict[str, list[dict[str, Any]]] | None = None,
        emit: EventSink | None = None,
    ) -> CFReport:
        """Enumerate -> parallel run_candidate -> select_best -> difference map.

        Candidates execute concurrently (bounded by the worker pool underneath)
        but are joined, logged, and reduced in index order, so completion
        scheduling never changes the report.
        """
        policy = policy or self.policy
        factual = self.store.get(factual_id)
        if region is None:
            region = default_region(factual.width, factual.height)
        grids = grids or strength_grids(editors)
        configs = enumerate_candidates(editors, grids, policy.budget)
        assert len(configs) <= policy.budget  # budget parity is structural

        with ThreadPoolExecutor(max_workers=min(len(configs), self.max_workers)) as pool:
            futures = [pool.submit(self.run_candidate, factual_id, cfg, region, policy)
                       for cfg in configs]
            candidates = [f.result() for f in futures]  # index order

        if emit is not None:
            for cand in candidates:
                emit("candidate_scored", {
                    "factual": "@" + factual_id,
                    "index": cand.config.index,
                    **cand.to_dict(),
                })

        best = select_best(candidates, policy)
        dm = metrics.difference_map(factual, self.store.get(best.image))
        dm_art = ImageArtifact.create(
            dm.pixels.astype("float32"),
            provenance="difference-map",
            meta={"factual": factual_id, "cf": best.image},
        )
        dm_id = self.store.put(dm_art)
        return CFReport(
            factual=factual_id,
            prompt=prompt,
            region=region,
            best=best,
            all=tuple(candidates),
            difference_map=dm_id,
        )
