"""Counterfactual quality metrics: SIP, CPG, flip rate, SSIM, difference maps.

All functions are pure over immutable images and safe to evaluate in
parallel. Images may be ImageArtifact instances or 2-D arrays; arithmetic is
float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .core import DimensionMismatch, ImageArtifact

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2
DEFAULT_FLIP_THRESHOLD = 0.5


class MetricError(Exception):
    pass


class OutOfRange(MetricError):
    pass


class EmptySet(MetricError):
    pass


class TooSmall(MetricError):
    pass


@dataclass(frozen=True)
class MetricBundle:
    """The four per-pair scores: prediction gain, flip flag, SSIM, SIP."""

    cpg: float
    flipped: bool
    ssim: float
    sip: float

    def to_dict(self) -> dict[str, Any]:
        return {"cpg": self.cpg, "flipped": self.flipped, "sip": self.sip, "ssim": self.ssim}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "MetricBundle":
        return MetricBundle(
            cpg=float(d["cpg"]), flipped=bool(d["flipped"]),
            ssim=float(d["ssim"]), sip=float(d["sip"]),
        )


@dataclass(frozen=True)
class DifferenceMap:
    """Per-pixel |cf - factual|; optionally max-normalized."""

    pixels: np.ndarray  # float64, values in [0,1]
    factual_id: str | None = None
    cf_id: str | None = None
    normalized: bool = False


def _as_array(img: Any) -> np.ndarray:
    if isinstance(img, ImageArtifact):
        return np.asarray(img.pixels, dtype=np.float64)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected 2-D image, got shape {arr.shape}")
    return arr


def _pair(a: Any, b: Any) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def sip(factual: Any, cf: Any) -> float:
    """Subject identity preservation: mean |factual - cf| (lower is better)."""
    x, y = _pair(factual, cf)
    return float(np.mean(np.abs(x - y)))


def cpg(score_factual: float, score_cf: float) -> float:
    """Prediction gain: |score_factual - score_cf| of the classifier."""
    for s in (score_factual, score_cf):
        if not (0.0 <= s <= 1.0):
            raise OutOfRange(f"score {s} outside [0,1]")
    return abs(score_factual - score_cf)


def flipped(score_factual: float, score_cf: float, threshold: float = DEFAULT_FLIP_THRESHOLD) -> bool:
    """True iff the thresholded label changes between factual and CF."""
    for s in (score_factual, score_cf):
        if not (0.0 <= s <= 1.0):
            raise OutOfRange(f"score {s} outside [0,1]")
    return (score_factual >= threshold) != (score_cf >= threshold)


def cfr(pairs: Sequence[tuple[float, float]] | Iterable[tuple[float, float]],
        threshold: float = DEFAULT_FLIP_THRESHOLD) -> float:
    """Flip rate over (score_factual, score_cf) pairs: flipped count / N."""
    pairs = list(pairs)
    if not pairs:
        raise EmptySet("cfr over empty pair list")
    flips = sum(1 for sf, sc in pairs if flipped(sf, sc, threshold))
    return flips / len(pairs)


def _gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    offsets = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation: rows then columns
    win = np.lib.stride_tricks.sliding_window_view(x, k.size, axis=0)
    y = win @ k
    win = np.lib.stride_tricks.sliding_window_view(y, k.size, axis=1)
    return win @ k


def ssim(factual: Any, cf: Any) -> float:
    """Mean local SSIM over all fully-contained 11x11 Gaussian windows.

    sigma=1.5, C1=(0.01 L)^2, C2=(0.03 L)^2 with L=1; covariances are the
    plain weighted moments (no sample-covariance correction).
    """
    x, y = _pair(factual, cf)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise TooSmall(f"need at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    k = _gaussian_kernel_1d()
    # 2-D kernel is the outer product; normalize the separable product exactly
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    s_xx = _filter_valid(x * x, k) - mu_x * mu_x
    s_yy = _filter_valid(y * y, k) - mu_y * mu_y
    s_xy = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * s_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (s_xx + s_yy + SSIM_C2)
    return float(np.mean(num / den))


def difference_map(factual: Any, cf: Any, normalize: bool = False,
                   factual_id: str | None = None, cf_id: str | None = None) -> DifferenceMap:
    """Per-pixel |factual - cf|; if normalize and the max is > 0, scaled to peak 1."""
    x, y = _pair(factual, cf)
    d = np.abs(x - y)
    if normalize:
        peak = float(d.max(initial=0.0))
        if peak > 0.0:
            d = d / peak
    if isinstance(factual, ImageArtifact) and factual_id is None:
        factual_id = factual.id
    if isinstance(cf, ImageArtifact) and cf_id is None:
        cf_id = cf.id
    return DifferenceMap(pixels=d, factual_id=factual_id, cf_id=cf_id, normalized=normalize)


def bundle(factual: Any, cf: Any, score_factual: float, score_cf: float,
           threshold: float = DEFAULT_FLIP_THRESHOLD) -> MetricBundle:
    """All four metrics for one factual/CF pair."""
    return MetricBundle(
        cpg=cpg(score_factual, score_cf),
        flipped=flipped(score_factual, score_cf, threshold),
        ssim=ssim(factual, cf),
        sip=sip(factual, cf),
    )
