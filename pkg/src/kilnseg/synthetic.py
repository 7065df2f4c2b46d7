"""Procedural furnace scenes with exact four-class ground truth.

A scene is a wall above a horizontal base line, a darker base ("slas")
below it, slag discs that grow slowly on the base, a dark camera-edge
vignette fixed to the camera, a camera offset that random-walks, and
per-frame flame or smoke overlays. Overlays change the RGB image only,
never the mask.

Randomness is keyed by ``(seed, step, purpose)`` through
:class:`numpy.random.SeedSequence`, so any frame can be regenerated
independently of how the stream was consumed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DatasetError

BACKGROUND, SLAG, EDGE, WALL = 0, 1, 2, 3
FRAME_SPACING = 10.0  # seconds between consecutive frames and within a pair

_WALL_RGB = np.array([120.0, 72.0, 52.0])
_BASE_RGB = np.array([72.0, 44.0, 34.0])
_SLAG_RGB = np.array([196.0, 150.0, 92.0])
_EDGE_RGB = np.array([14.0, 12.0, 12.0])
_FLAME_RGB = np.array([230.0, 168.0, 96.0])
_SMOKE_RGB = np.array([138.0, 136.0, 140.0])

# random-stream purposes
_BLOBS, _STEP, _RENDER, _TEXTURE, _SPLIT = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class SceneParams:
    """Generator magnitudes. Lengths are fractions of the image height unless noted."""

    height: int = 64
    width: int = 64
    seed: int = 0
    growth_rate: float = 4e-6  # blob radius growth per second
    blob_count: tuple = (2, 5)  # inclusive range
    blob_radius: tuple = (0.055, 0.11)
    occlusion_prob: float = 0.3
    opacity_range: tuple = (0.05, 0.95)
    occlusion_extent: tuple = (0.25, 0.55)  # gaussian sigma of the overlay
    visibility_threshold: float = 0.3  # peak opacity at which a frame counts as occluded
    jitter: float = 1.5  # pixels, bound of the camera offset
    removal_events: tuple = ()  # times in seconds
    removal_factor: float = 0.55  # radius multiplier applied at a removal event
    base_line: float = 0.5  # wall/base boundary, from the top
    edge_radius: float = 0.52  # vignette ellipse semi-axis, fraction of each image side
    noise: float = 6.0  # sensor noise std in 8-bit levels
    brightness: float = 0.06  # per-frame illumination jitter (relative)

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"image {self.height}x{self.width} below 16 px")
        if self.growth_rate < 0:
            raise ConfigError("growth_rate must be >= 0")
        for name in ("occlusion_prob", "visibility_threshold", "removal_factor", "base_line"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.opacity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("opacity_range must be an ordered pair within [0, 1]")
        if self.blob_count[0] < 0 or self.blob_count[0] > self.blob_count[1]:
            raise ConfigError("blob_count must be an ordered non-negative range")
        if self.blob_radius[0] < 0 or self.blob_radius[0] > self.blob_radius[1]:
            raise ConfigError("blob_radius must be an ordered non-negative range")
        if self.jitter < 0 or self.noise < 0:
            raise ConfigError("jitter and noise must be >= 0")

    def with_(self, **changes) -> "SceneParams":
        return replace(self, **changes)

    @property
    def base_row(self) -> float:
        return self.base_line * self.height


@dataclass(frozen=True)
class Occlusion:
    kind: str  # "flame" | "smoke"
    opacity: float
    center: tuple  # (row, col) in image pixels
    extent: float  # gaussian sigma in pixels
    pattern: int = 0  # seed of the flame-tongue structure


@dataclass(frozen=True)
class KilnState:
    blobs: np.ndarray = field(repr=False)  # (n, 3): centre row, centre col, radius (scene pixels)
    t: float = 0.0
    offset: tuple = (0.0, 0.0)  # camera offset (rows, cols)
    occlusion: Optional[Occlusion] = None
    step: int = 0


@dataclass(frozen=True)
class Frame:
    image: np.ndarray = field(repr=False)  # (H, W, 3) uint8
    mask: np.ndarray = field(repr=False)  # (H, W) uint8 class ids
    occluded: bool
    opacity: float
    slag_fraction: float
    timestamp: float


@dataclass(frozen=True)
class FramePair:
    prev: Frame
    cur: Frame

    @property
    def delta(self) -> float:
        return self.cur.timestamp - self.prev.timestamp


def _rng(params: SceneParams, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([params.seed & 0xFFFFFFFF, *key]))


def _sample_occlusion(params: SceneParams, rng: np.random.Generator) -> Optional[Occlusion]:
    if rng.random() >= params.occlusion_prob:
        return None
    h, w = params.height, params.width
    kind = "flame" if rng.random() < 0.5 else "smoke"
    opacity = float(rng.uniform(*params.opacity_range))
    if kind == "flame":  # burner flames rise from the base, where they pass for hot slag
        center = (float(rng.uniform(0.45 * h, h)), float(rng.uniform(0.15 * w, 0.85 * w)))
    else:
        center = (float(rng.uniform(0, h)), float(rng.uniform(0, w)))
    extent = float(rng.uniform(*params.occlusion_extent)) * h
    return Occlusion(kind, opacity, center, extent, int(rng.integers(1 << 31)))


def is_occluded(occlusion: Optional[Occlusion], params: SceneParams) -> bool:
    return occlusion is not None and occlusion.opacity >= params.visibility_threshold


def init_scene(params: SceneParams) -> KilnState:
    """Initial blobs on the base band, zero camera offset, a first occlusion draw."""
    rng = _rng(params, _BLOBS)
    h, w = params.height, params.width
    n = int(rng.integers(params.blob_count[0], params.blob_count[1] + 1))
    rows = rng.uniform(params.base_row, h, size=n)
    cols = rng.uniform(0.15 * w, 0.85 * w, size=n)
    radii = rng.uniform(*params.blob_radius, size=n) * h
    blobs = np.stack([rows, cols, radii], axis=1) if n else np.zeros((0, 3))
    occlusion = _sample_occlusion(params, _rng(params, _STEP, 0))
    return KilnState(blobs=blobs, t=0.0, offset=(0.0, 0.0), occlusion=occlusion, step=0)


def advance_scene(state: KilnState, delta: float, params: SceneParams) -> KilnState:
    """Grow blobs by ``growth_rate * delta``, apply removal events in ``(t, t + delta]``,
    random-walk the camera within the jitter bound and redraw the occlusion."""
    if delta <= 0:
        raise ConfigError("delta must be positive")
    t_new = state.t + delta
    blobs = state.blobs.copy()
    blobs[:, 2] += params.growth_rate * params.height * delta
    for event in params.removal_events:
        if state.t < event <= t_new:
            blobs[:, 2] *= params.removal_factor
    step = state.step + 1
    rng = _rng(params, _STEP, step)
    occlusion = _sample_occlusion(params, rng)
    walk = rng.normal(scale=params.jitter / 2, size=2) if params.jitter else np.zeros(2)
    offset = tuple(float(v) for v in np.clip(np.add(state.offset, walk), -params.jitter, params.jitter))
    return KilnState(blobs=blobs, t=t_new, offset=offset, occlusion=occlusion, step=step)


# ----------------------------------------------------------------- rendering


def _pixel_grid(params: SceneParams):
    rows = np.arange(params.height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(params.width, dtype=np.float64)[None, :] + 0.5
    return rows, cols


def edge_mask(params: SceneParams) -> np.ndarray:
    """Camera-edge vignette: pixels outside an ellipse centred on the image."""
    rows, cols = _pixel_grid(params)
    u = (rows - params.height / 2) / (params.edge_radius * params.height)
    v = (cols - params.width / 2) / (params.edge_radius * params.width)
    return u**2 + v**2 > 1.0


def segmentation_mask(state: KilnState, params: SceneParams) -> np.ndarray:
    rows, cols = _pixel_grid(params)
    y = rows + state.offset[0]
    x = cols + state.offset[1]
    mask = np.where(y < params.base_row, WALL, BACKGROUND) * np.ones_like(x, dtype=np.int64)
    slag = np.zeros(mask.shape, dtype=bool)
    for cy, cx, r in state.blobs:
        slag |= (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    mask[slag & (y >= params.base_row)] = SLAG
    mask[edge_mask(params)] = EDGE
    return mask.astype(np.uint8)


def analytic_slag_pixels(state: KilnState, params: SceneParams) -> int:
    """Slag pixel count by per-row interval arithmetic (no 2D distance test)."""
    h, w = params.height, params.width
    dy, dx = state.offset
    half_w = params.edge_radius * w
    total = 0
    for r in range(h):
        y = r + 0.5 + dy
        if y < params.base_row:
            continue
        covered = np.zeros(w, dtype=bool)
        for cy, cx, rad in state.blobs:
            gap = rad * rad - (y - cy) ** 2
            if gap < 0:
                continue
            span = np.sqrt(gap)
            lo = int(np.ceil(cx - span - 0.5 - dx))
            hi = int(np.floor(cx + span - 0.5 - dx))
            covered[max(lo, 0) : max(min(hi, w - 1) + 1, 0)] = True
        u = (r + 0.5 - h / 2) / (params.edge_radius * h)
        if u * u <= 1.0:
            reach = half_w * np.sqrt(1.0 - u * u)
            c = np.arange(w) + 0.5 - w / 2
            covered &= c * c <= reach * reach
        else:
            covered[:] = False
        total += int(covered.sum())
    return total


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 8) -> np.ndarray:
    coarse = rng.normal(size=(cells + 1, cells + 1))
    ry = np.linspace(0, cells, h)
    rx = np.linspace(0, cells, w)
    rows = np.stack([np.interp(rx, np.arange(cells + 1), line) for line in coarse])
    return np.stack([np.interp(ry, np.arange(cells + 1), rows[:, j]) for j in range(w)], axis=1)


def _texture(params: SceneParams) -> np.ndarray:
    """Static scene texture, padded by the jitter margin so camera motion samples it."""
    m = int(np.ceil(params.jitter)) + 1
    rng = _rng(params, _TEXTURE)
    coarse = _smooth_field(rng, params.height + 2 * m, params.width + 2 * m, cells=6)
    fine = _smooth_field(rng, params.height + 2 * m, params.width + 2 * m, cells=24)
    return 0.7 * coarse + 0.5 * fine


def overlay_alpha(occlusion: Optional[Occlusion], params: SceneParams) -> np.ndarray:
    rows, cols = _pixel_grid(params)
    if occlusion is None:
        return np.zeros((params.height, params.width))
    d2 = (rows - occlusion.center[0]) ** 2 + (cols - occlusion.center[1]) ** 2
    alpha = occlusion.opacity * np.exp(-d2 / (2 * occlusion.extent**2))
    if occlusion.kind == "flame":
        # bright tongues rather than a uniform glow; full opacity survives at the crests
        field = _smooth_field(np.random.default_rng(occlusion.pattern), params.height, params.width, cells=6)
        alpha = alpha * np.clip(0.45 + 0.9 * field, 0.0, 1.0)
    return alpha


def render_frame(state: KilnState, params: SceneParams, occlude: bool = True) -> Frame:
    """RGB render and exact mask. ``occlude=False`` omits the overlay (mask unchanged)."""
    mask = segmentation_mask(state, params)
    m = int(np.ceil(params.jitter)) + 1
    tex = _texture(params)
    r0 = int(np.round(state.offset[0])) + m
    c0 = int(np.round(state.offset[1])) + m
    t = tex[r0 : r0 + params.height, c0 : c0 + params.width][..., None]

    rgb = np.empty((params.height, params.width, 3))
    rgb[:] = _BASE_RGB
    rgb[mask == WALL] = _WALL_RGB
    rgb[mask == SLAG] = _SLAG_RGB
    rgb *= 1.0 + 0.12 * t
    rows, cols = _pixel_grid(params)
    u = (rows - params.height / 2) / (params.edge_radius * params.height)
    v = (cols - params.width / 2) / (params.edge_radius * params.width)
    fade = np.clip(1.6 - (u**2 + v**2), 0.0, 1.0)[..., None]  # darken toward the edge
    rgb = rgb * (0.55 + 0.45 * fade)
    rgb[mask == EDGE] = _EDGE_RGB

    rng = _rng(params, _RENDER, state.step)
    rgb *= 1.0 + rng.uniform(-params.brightness, params.brightness)
    rgb += rng.normal(scale=params.noise, size=rgb.shape)
    occ = state.occlusion if occlude else None
    if occ is not None:
        alpha = overlay_alpha(occ, params)[..., None]
        colour = _FLAME_RGB if occ.kind == "flame" else _SMOKE_RGB
        rgb = (1 - alpha) * rgb + alpha * colour
    image = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    fraction = float(np.mean(mask == SLAG))
    opacity = occ.opacity if occ is not None else 0.0
    return Frame(image, mask, is_occluded(occ, params), opacity, fraction, state.t)


# ----------------------------------------------------------------- datasets


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    if n < 1:
        raise ConfigError("need at least one item")
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ConfigError("split ratios must be non-negative and sum to 1")
    quotas = ratios * n
    sizes = np.floor(quotas + 1e-9).astype(int)
    remainder = quotas - sizes
    for i in sorted(range(len(ratios)), key=lambda i: (-remainder[i], i))[: n - sizes.sum()]:
        sizes[i] += 1
    return [int(s) for s in sizes]


SPLITS = ("train", "val", "test")


def _scene_for(params: SceneParams, index: int, attempt: int) -> SceneParams:
    digest = hashlib.blake2b(f"{params.seed}:{index}:{attempt}".encode(), digest_size=4).digest()
    return params.with_(seed=int.from_bytes(digest, "little"))


def sample_pair(params: SceneParams, index: int, max_attempts: int = 1000) -> FramePair:
    """An (earlier, later) pair from an independent scene at a random time.

    Only the later frame must be unoccluded; the earlier one keeps whatever
    occlusion the scene drew.
    """
    for attempt in range(max_attempts):
        scene = _scene_for(params, index, attempt)
        state = init_scene(scene)
        age = float(_rng(scene, _SPLIT).uniform(0, 3600))
        if age > 0:
            state = advance_scene(state, age, scene)
        later = advance_scene(state, FRAME_SPACING, scene)
        if is_occluded(later.occlusion, scene):
            continue
        return FramePair(render_frame(state, scene), render_frame(later, scene))
    raise ConfigError("could not draw an unoccluded pair; occlusion_prob too high")


def sample_occlusion_frame(params: SceneParams, index: int) -> Frame:
    scene = _scene_for(params, index, 0)
    state = advance_scene(init_scene(scene), float(_rng(scene, _SPLIT).uniform(1, 3600)), scene)
    return render_frame(state, scene)


def _save_png(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(array).save(path, format="PNG", optimize=False)


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image

    if not path.exists():
        raise DatasetError(f"missing dataset file {path}")
    with Image.open(path) as img:
        return np.asarray(img).copy()


def _frame_record(root: Path, frame: Frame, stem: str) -> dict:
    image, mask = f"images/{stem}.png", f"masks/{stem}.png"
    _save_png(root / image, frame.image)
    _save_png(root / mask, frame.mask)
    return {"image": image, "mask": mask, "timestamp": frame.timestamp, "occluded": frame.occluded,
            "opacity": round(frame.opacity, 6), "slag_fraction": frame.slag_fraction}


def _write_manifest(root: Path, records: list[dict]) -> Path:
    path = root / "manifest.jsonl"
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def make_dataset(params: SceneParams, out_dir, n_pairs: int = 420,
                 split_ratios: Sequence[float] = (0.64, 0.16, 0.20)) -> Path:
    """Write segmentation pairs (PNG frames and masks) and a JSON-lines manifest."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(n_pairs, split_ratios)
    splits = [name for name, size in zip(SPLITS, sizes) for _ in range(size)]
    records = []
    for i, split in enumerate(splits):
        pair = sample_pair(params, i)
        records.append({
            "id": i, "split": split, "delta": pair.delta,
            "prev": _frame_record(root, pair.prev, f"{i:05d}_prev"),
            "cur": _frame_record(root, pair.cur, f"{i:05d}_cur"),
        })
    return _write_manifest(root, records)


def make_occlusion_dataset(params: SceneParams, out_dir, n_frames: int = 600,
                           split_ratios: Sequence[float] = (0.64, 0.16, 0.20)) -> Path:
    """Single frames labelled with the exact occlusion flag."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(n_frames, split_ratios)
    splits = [name for name, size in zip(SPLITS, sizes) for _ in range(size)]
    records = []
    for i, split in enumerate(splits):
        frame = sample_occlusion_frame(params, i)
        records.append({"id": i, "split": split, **_frame_record(root, frame, f"{i:05d}")})
    return _write_manifest(root, records)


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.jsonl").read_bytes()).hexdigest()


@dataclass
class PairSplit:
    prev_images: np.ndarray  # (N, H, W, 3) uint8
    cur_images: np.ndarray
    prev_masks: np.ndarray  # (N, H, W) uint8
    cur_masks: np.ndarray

    def __len__(self) -> int:
        return len(self.cur_images)


def load_pairs(root, split: str) -> PairSplit:
    root = Path(root)
    recs = [r for r in read_manifest(root) if r["split"] == split]
    if not recs:
        raise DatasetError(f"split {split!r} is empty in {root}")
    load = lambda key, kind: np.stack([_load_png(root / r[key][kind]) for r in recs])  # noqa: E731
    return PairSplit(load("prev", "image"), load("cur", "image"), load("prev", "mask"), load("cur", "mask"))


def load_occlusion_split(root, split: str) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    recs = [r for r in read_manifest(root) if r["split"] == split]
    if not recs:
        raise DatasetError(f"split {split!r} is empty in {root}")
    images = np.stack([_load_png(root / r["image"]) for r in recs])
    return images, np.array([r["occluded"] for r in recs], dtype=bool)


# ------------------------------------------------------------------- streams

PROFILES = ("gradual", "removal")


def stream_params(params: SceneParams, n_frames: int, profile: str) -> SceneParams:
    """``gradual`` clears removal events; ``removal`` schedules two if none are given."""
    if profile == "gradual":
        return params.with_(removal_events=())
    if profile == "removal":
        if params.removal_events:
            return params
        span = n_frames * FRAME_SPACING
        return params.with_(removal_events=(round(span / 3, 1) + 5.0, round(2 * span / 3, 1) + 5.0))
    raise ConfigError(f"unknown stream profile {profile!r}; expected one of {PROFILES}")


def make_stream(params: SceneParams, n_frames: int, profile: str = "gradual") -> Iterator[Frame]:
    """Frames at 10-second spacing from one evolving scene."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    scene = stream_params(params, n_frames, profile)
    state = init_scene(scene)
    for i in range(n_frames):
        if i:
            state = advance_scene(state, FRAME_SPACING, scene)
        yield render_frame(state, scene)


def save_stream(frames, out_dir) -> Path:
    """Write a stream as PNG frames and masks plus a JSON-lines manifest."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = [{"id": i, **_frame_record(root, frame, f"{i:05d}")} for i, frame in enumerate(frames)]
    return _write_manifest(root, records)


def load_stream(root) -> list[Frame]:
    root = Path(root)
    frames = []
    for rec in read_manifest(root):
        frames.append(Frame(_load_png(root / rec["image"]), _load_png(root / rec["mask"]),
                            bool(rec["occluded"]), float(rec["opacity"]), float(rec["slag_fraction"]),
                            float(rec["timestamp"])))
    return frames
