"""Deterministic synthetic tool suite.

Procedurally generated scenes (linear-gradient background + seeded noise +
an optional bright lesion disk) stand in for chest X-rays, and small pure
functions stand in for the large pretrained models: a percentile-contrast
classifier, two editors with different side-effect profiles (region-grounded
vs global), a findings report, and a threshold segmenter. Every output is a
pure function of (args, referenced pixels), byte-identical across runs and
hosts.

Scene ground truth travels in artifact meta under the "scene" key so test
oracles need no hidden state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .core import ArtifactStore, ImageArtifact, UnknownArtifact

CLASSIFIER_BETA = 4.0
CLASSIFIER_PERCENTILE = 99.0
MIN_DIM, MAX_DIM = 16, 512

EDITOR_TOOLS = ("edit_a", "edit_b")

_SPLIT_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


class StubError(Exception):
    """Tool-domain failure; surfaces on the wire as {code, message}."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def unit_noise(seed: int, count: int, stream: int = 0) -> np.ndarray:
    """count values in [0,1), from a counter-based xorshift-multiply mix.

    Specified by (seed, stream) only and evaluated per index, so any language
    reproduces identical streams without sequential state.
    """
    base = np.uint64((seed ^ (stream * 0x632BE59BD9B4E019)) & 0xFFFFFFFFFFFFFFFF)
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (base + idx * _SPLIT_GAMMA) & _MASK
        z ^= z >> np.uint64(30)
        z = (z * _MIX_1) & _MASK
        z ^= z >> np.uint64(27)
        z = (z * _MIX_2) & _MASK
        z ^= z >> np.uint64(31)
    return (z >> np.uint64(40)).astype(np.float64) / float(1 << 24)


@dataclass(frozen=True)
class Lesion:
    cx: int
    cy: int
    r: int
    a: float  # amplitude added inside the disk, in [0,1]


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    width: int
    height: int
    g0: float  # gradient start intensity (left edge)
    g1: float  # gradient end intensity (right edge)
    noise_amp: float
    lesion: Lesion | None = None


def _check_dims(width: int, height: int) -> None:
    if not (MIN_DIM <= width <= MAX_DIM and MIN_DIM <= height <= MAX_DIM):
        raise StubError("bad_dimensions", f"dimensions must be in [{MIN_DIM},{MAX_DIM}], got {width}x{height}")


def _check_disk_inside(width: int, height: int, cx: int, cy: int, r: int) -> None:
    if r < 1 or cx - r < 0 or cy - r < 0 or cx + r > width - 1 or cy + r > height - 1:
        raise StubError("bad_region", f"disk (cx={cx}, cy={cy}, r={r}) not inside {width}x{height}")


def disk_mask(width: int, height: int, cx: int, cy: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r


def render_background(scene: SyntheticScene) -> np.ndarray:
    """Lesion-free background: horizontal gradient g0->g1 plus centered noise."""
    w, h = scene.width, scene.height
    t = np.linspace(0.0, 1.0, w, dtype=np.float64) if w > 1 else np.zeros(1)
    base = scene.g0 + (scene.g1 - scene.g0) * t
    img = np.repeat(base[np.newaxis, :], h, axis=0)
    if scene.noise_amp > 0.0:
        noise = unit_noise(scene.seed, w * h).reshape(h, w)
        img = img + scene.noise_amp * (2.0 * noise - 1.0)
    return np.clip(img, 0.0, 1.0)


def render_scene(scene: SyntheticScene) -> np.ndarray:
    img = render_background(scene)
    les = scene.lesion
    if les is not None and les.a > 0.0:
        _check_disk_inside(scene.width, scene.height, les.cx, les.cy, les.r)
        img = img + les.a * disk_mask(scene.width, scene.height, les.cx, les.cy, les.r)
    return np.clip(img, 0.0, 1.0)


def scene_to_json(scene: SyntheticScene) -> str:
    d: dict[str, Any] = {
        "seed": scene.seed, "width": scene.width, "height": scene.height,
        "g0": scene.g0, "g1": scene.g1, "noise_amp": scene.noise_amp,
    }
    if scene.lesion is not None:
        d["lesion"] = {"cx": scene.lesion.cx, "cy": scene.lesion.cy,
                       "r": scene.lesion.r, "a": scene.lesion.a}
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def scene_from_json(blob: str) -> SyntheticScene:
    d = json.loads(blob)
    lesion = None
    if "lesion" in d:
        lesion = Lesion(cx=int(d["lesion"]["cx"]), cy=int(d["lesion"]["cy"]),
                        r=int(d["lesion"]["r"]), a=float(d["lesion"]["a"]))
    return SyntheticScene(seed=int(d["seed"]), width=int(d["width"]), height=int(d["height"]),
                          g0=float(d["g0"]), g1=float(d["g1"]),
                          noise_amp=float(d["noise_amp"]), lesion=lesion)


def scene_of(artifact: ImageArtifact) -> SyntheticScene | None:
    blob = artifact.meta.get("scene")
    return scene_from_json(blob) if blob else None


def derived_background(seed: int) -> tuple[float, float, float]:
    """(g0, g1, noise_amp) derived from the seed when not given explicitly.

    Ranges are tight enough that a lesion-free image scores well below the
    flip threshold and editor monotonicity holds over the whole strength grid.
    """
    u = unit_noise(seed, 3, stream=7)
    g0 = 0.32 + 0.10 * u[0]
    g1 = g0 + (-0.08 + 0.16 * u[1])
    noise_amp = 0.005 + 0.010 * u[2]
    return float(g0), float(g1), float(noise_amp)


def random_scene(seed: int, width: int = 64, height: int = 64) -> SyntheticScene:
    """Seeded lesion scene used by the bench corpus and property tests."""
    g0, g1, noise_amp = derived_background(seed)
    u = unit_noise(seed, 4, stream=11)
    r = int(width // 8 + u[0] * (width // 5 - width // 8))
    cx = int(r + 2 + u[1] * (width - 2 * r - 5))
    cy = int(r + 2 + u[2] * (height - 2 * r - 5))
    a = 0.60 + 0.25 * float(u[3])
    return SyntheticScene(seed=seed, width=width, height=height, g0=g0, g1=g1,
                          noise_amp=noise_amp, lesion=Lesion(cx=cx, cy=cy, r=r, a=a))


def quadrant_name(cx: int, cy: int, width: int, height: int) -> str:
    vertical = "upper" if cy < height / 2 else "lower"
    horizontal = "left" if cx < width / 2 else "right"
    return f"{vertical}-{horizontal}"


def classify_score(pixels: np.ndarray) -> float:
    """clamp01(beta * (p99 - mean)) over the pixel values.

    p99 is the linearly interpolated 99th percentile; a bright lesion lifts
    the upper tail far above the mean while a clean background keeps the two
    close together.
    """
    x = np.asarray(pixels, dtype=np.float64)
    p99 = float(np.percentile(x, CLASSIFIER_PERCENTILE))
    mu = float(np.mean(x))
    return float(min(1.0, max(0.0, CLASSIFIER_BETA * (p99 - mu))))


def _box_blur5(x: np.ndarray) -> np.ndarray:
    # separable 5x5 box mean with edge padding
    pad = np.pad(x, 2, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, 5, axis=0).mean(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(win, 5, axis=1).mean(axis=-1)


def _as_f32(img64: np.ndarray) -> np.ndarray:
    return np.clip(img64, 0.0, 1.0).astype(np.float32)


class Toolbox:
    """The stub tool implementations, bound to an artifact store.

    Used in-process by the CLI metrics path and over the wire by
    stub_server; argument values arrive JSON-decoded (artifact references as
    "@hex" strings).
    """

    def __init__(self, store: ArtifactStore):
        self.store = store

    # -- helpers ------------------------------------------------------------

    def _fetch(self, ref: Any) -> ImageArtifact:
        if not isinstance(ref, str) or not ref.startswith("@"):
            raise StubError("bad_args", f"expected artifact reference, got {ref!r}")
        try:
            return self.store.get(ref[1:])
        except UnknownArtifact:
            raise StubError("unknown_artifact", f"no artifact {ref}") from None

    @staticmethod
    def _strength(value: Any) -> float:
        try:
            s = float(value)
        except (TypeError, ValueError):
            raise StubError("bad_args", f"strength must be numeric, got {value!r}") from None
        if not (0.0 <= s <= 1.0):
            raise StubError("bad_strength", f"strength must be in [0,1], got {s}")
        return s

    # -- tools --------------------------------------------------------------

    def gen_image(self, seed: int, width: int, height: int,
                  lesion_cx: int | None = None, lesion_cy: int | None = None,
                  lesion_r: int | None = None, lesion_a: float | None = None,
                  g0: float | None = None, g1: float | None = None,
                  noise: float | None = None) -> dict[str, Any]:
        _check_dims(int(width), int(height))
        lesion_args = [lesion_cx, lesion_cy, lesion_r, lesion_a]
        if any(v is not None for v in lesion_args) and any(v is None for v in lesion_args):
            raise StubError("bad_args", "lesion_cx/cy/r/a must be given together")
        if g0 is None or g1 is None or noise is None:
            d0, d1, dn = derived_background(int(seed))
            g0 = d0 if g0 is None else float(g0)
            g1 = d1 if g1 is None else float(g1)
            noise = dn if noise is None else float(noise)
        lesion = None
        if lesion_cx is not None and float(lesion_a) > 0.0:
            lesion = Lesion(cx=int(lesion_cx), cy=int(lesion_cy), r=int(lesion_r), a=float(lesion_a))
            _check_disk_inside(int(width), int(height), lesion.cx, lesion.cy, lesion.r)
        scene = SyntheticScene(seed=int(seed), width=int(width), height=int(height),
                               g0=float(g0), g1=float(g1), noise_amp=float(noise), lesion=lesion)
        art = ImageArtifact.create(
            _as_f32(render_scene(scene)),
            provenance=f"stub-gen:seed={scene.seed}",
            meta={"scene": scene_to_json(scene)},
        )
        return {"image": "@" + self.store.put(art)}

    def classify(self, image: Any) -> dict[str, Any]:
        art = self._fetch(image)
        return {"score": classify_score(art.pixels)}

    def edit_a(self, image: Any, cx: int, cy: int, r: int, strength: Any) -> dict[str, Any]:
        """Region-grounded edit: blend the disk toward the lesion-free background."""
        art = self._fetch(image)
        s = self._strength(strength)
        cx, cy, r = int(cx), int(cy), int(r)
        _check_disk_inside(art.width, art.height, cx, cy, r)
        scene = scene_of(art)
        if scene is None:
            raise StubError("no_ground_truth", "edit_a needs a stub-generated input")
        if s == 0.0:
            return {"image": "@" + art.id}
        img = np.asarray(art.pixels, dtype=np.float64)
        bg = render_background(scene)
        mask = disk_mask(art.width, art.height, cx, cy, r).astype(np.float64)
        out = img * (1.0 - s * mask) + bg * (s * mask)
        edited = ImageArtifact.create(
            _as_f32(out),
            provenance=f"stub-editor:edit_a:strength={s}",
            meta={"scene": art.meta.get("scene", ""), "edited_from": art.id,
                  "editor": "edit_a", "strength": repr(s)},
        )
        return {"image": "@" + self.store.put(edited)}

    def edit_b(self, image: Any, cx: int = 0, cy: int = 0, r: int = 0, strength: Any = 0.0) -> dict[str, Any]:
        """Global edit: suppress everything brighter than its local mean.

        Accepts the same region args as edit_a (so the two are interchangeable
        in a fallback chain) but edits the whole frame.
        """
        art = self._fetch(image)
        s = self._strength(strength)
        if s == 0.0:
            return {"image": "@" + art.id}
        img = np.asarray(art.pixels, dtype=np.float64)
        out = img - s * np.maximum(0.0, img - _box_blur5(img))
        edited = ImageArtifact.create(
            _as_f32(out),
            provenance=f"stub-editor:edit_b:strength={s}",
            meta={"scene": art.meta.get("scene", ""), "edited_from": art.id,
                  "editor": "edit_b", "strength": repr(s)},
        )
        return {"image": "@" + self.store.put(edited)}

    def report(self, image: Any) -> dict[str, Any]:
        art = self._fetch(image)
        scene = scene_of(art)
        if scene is None:
            raise StubError("no_ground_truth", "report needs a stub-generated input")
        les = scene.lesion
        if les is None or les.a <= 0.0:
            return {"findings": "no finding"}
        quadrant = quadrant_name(les.cx, les.cy, scene.width, scene.height)
        return {
            "findings": f"lesion in {quadrant} quadrant",
            "region": {"cx": les.cx, "cy": les.cy, "r": les.r},
        }

    def segment(self, image: Any) -> dict[str, Any]:
        art = self._fetch(image)
        x = np.asarray(art.pixels, dtype=np.float64)
        threshold = float(np.mean(x)) + 2.0 * float(np.std(x))
        mask = (x > threshold).astype(np.float32)
        out = ImageArtifact.create(mask, provenance="stub-segment",
                                   meta={"mask_of": art.id})
        return {"mask": "@" + self.store.put(out)}

    # -- dispatch -----------------------------------------------------------

    _TOOLS = ("gen_image", "classify", "edit_a", "edit_b", "report", "segment")

    def dispatch(self, tool: str, args: dict[str, Any]) -> dict[str, Any]:
        if tool not in self._TOOLS:
            raise StubError("unknown_tool", f"no stub tool {tool!r}")
        try:
            return getattr(self, tool)(**args)
        except TypeError as exc:
            raise StubError("bad_args", str(exc)) from None


def stub_schemas() -> dict[str, dict[str, Any]]:
    """Wire/configuration form of every stub tool's schema."""
    def arg(kind: str, required: bool = True) -> dict[str, Any]:
        return {"type": kind, "required": required}

    region = {"cx": arg("int"), "cy": arg("int"), "r": arg("int")}
    return {
        "gen_image": {
            "args": {
                "seed": arg("int"), "width": arg("int"), "height": arg("int"),
                "lesion_cx": arg("int", False), "lesion_cy": arg("int", False),
                "lesion_r": arg("int", False), "lesion_a": arg("real", False),
                "g0": arg("real", False), "g1": arg("real", False), "noise": arg("real", False),
            },
            "returns": "{image: artifact}",
        },
        "classify": {"args": {"image": arg("artifact")}, "returns": "{score: real}"},
        "edit_a": {
            "args": {"image": arg("artifact"), **region, "strength": arg("real")},
            "returns": "{image: artifact}",
        },
        "edit_b": {
            "args": {"image": arg("artifact"), **region, "strength": arg("real")},
            "returns": "{image: artifact}",
        },
        "report": {"args": {"image": arg("artifact")}, "returns": "{findings: string, region?: {cx, cy, r}}"},
        "segment": {"args": {"image": arg("artifact")}, "returns": "{mask: artifact}"},
    }
