"""Classical reference implementations of the four perceptual effects.

These produce the (input, target) pairs the learned model is trained on.
Everything here is deterministic given its parameters and seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from .errors import ContractError, DomainError
from .imaging import Image, hsv_to_rgb, rgb_to_hsv
from .tasks import TaskKind, TaskSpec

RED_HUE = 0.0
BLUE_HUE = 240.0 / 360.0

# foveation blur is specified in pixels at this reference resolution
SIGMA_REFERENCE_SIZE = 256


@dataclass(frozen=True)
class EffectParams:
    seed: int = 0
    gaze: tuple = (0.5, 0.5)
    fovea_radius: float = 0.15
    sigma_max: float = 12.0
    noise_density: float = 0.05
    quant_bits: int = 4
    depth_threshold: float = 0.5
    hue_strength: float = 1.0
    segments: int = 8
    intensity: float = 1.0

    def __post_init__(self):
        gx, gy = self.gaze
        if not (0 <= gx <= 1 and 0 <= gy <= 1):
            raise ContractError(f"gaze {self.gaze} outside [0,1]^2")
        if not 0 <= self.fovea_radius < 1:
            raise ContractError("fovea_radius must lie in [0, 1)")
        if self.sigma_max < 0:
            raise ContractError("sigma_max must be non-negative")
        if not 0 <= self.noise_density <= 1:
            raise ContractError("noise_density must lie in [0, 1]")
        if not 1 <= int(self.quant_bits) <= 8:
            raise ContractError("quant_bits must lie in [1, 8]")
        if not 0 <= self.depth_threshold <= 1:
            raise ContractError("depth_threshold must lie in [0, 1]")
        if not 0 <= self.hue_strength <= 1:
            raise ContractError("hue_strength must lie in [0, 1]")
        if not 0 < self.intensity <= 1:
            raise ContractError("intensity must lie in (0, 1]")
        if self.segments < 1:
            raise ContractError("segments must be >= 1")
        object.__setattr__(self, "gaze", (float(gx), float(gy)))

    def sigma_for(self, height: int, width: int) -> float:
        """Peak blur in pixels at a given resolution."""
        return self.sigma_max * min(height, width) / SIGMA_REFERENCE_SIZE

    def as_dict(self):
        d = asdict(self)
        d["gaze"] = list(self.gaze)
        return d

    @classmethod
    def from_dict(cls, d) -> "EffectParams":
        d = dict(d)
        if "gaze" in d:
            d["gaze"] = tuple(d["gaze"])
        return cls(**d)


def _require(img: Image, domain: str):
    if img.domain != domain or img.colorspace != "RGB":
        raise DomainError(
            f"expected a {domain} RGB image, got {img.domain} {img.colorspace}"
        )


def quantize_dynamic_range(img: Image, bits: int) -> Image:
    """Requantize 8-bit values onto ``2**bits`` evenly spread full-range levels."""
    _require(img, "u8")
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise ContractError(f"bits must be an integer in [1, 8], got {bits!r}")
    top = (1 << int(bits)) - 1
    v = img.data.astype(np.int64)
    # integer round-half-up of v*top/255, then of level*255/top
    level = (2 * v * top + 255) // 510
    out = (2 * level * 255 + top) // (2 * top)
    return Image(np.clip(out, 0, 255).astype(np.uint8), "u8")


def salt_pepper_positions(height: int, width: int, density: float, seed: int):
    """Flat pixel indices for (salt, pepper), sampled without replacement."""
    if not 0.0 <= density <= 1.0:
        raise ContractError(f"density {density} outside [0, 1]")
    n_pixels = height * width
    n = min(n_pixels, math.floor(round(density * n_pixels, 9)))
    rng = np.random.default_rng(seed)
    idx = rng.choice(n_pixels, size=n, replace=False)
    n_salt = (n + 1) // 2
    return idx[:n_salt], idx[n_salt:]


def add_salt_pepper(img: Image, density: float, seed: int) -> Image:
    _require(img, "u8")
    salt, pepper = salt_pepper_positions(img.height, img.width, density, seed)
    flat = img.data.reshape(-1, 3).copy()
    flat[salt] = 255
    flat[pepper] = 0
    return Image(flat.reshape(img.shape), "u8")


def _balanced_noise(height: int, width: int, seed: int) -> np.ndarray:
    """+-1 field whose every aligned 2x2 block sums to zero."""
    rng = np.random.default_rng(seed)
    hb, wb = (height + 1) // 2, (width + 1) // 2
    ranks = rng.random((hb, wb, 4)).argsort(axis=2).argsort(axis=2)
    cells = np.where(ranks < 2, 1.0, -1.0)
    field_ = cells.reshape(hb, wb, 2, 2).transpose(0, 2, 1, 3).reshape(2 * hb, 2 * wb)
    return field_[:height, :width]


def eccentricity(height: int, width: int, gaze) -> np.ndarray:
    """Distance from the gaze point, as a fraction of the image diagonal."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    gx, gy = gaze[0] * width, gaze[1] * height
    return np.hypot(xx - gx, yy - gy) / math.hypot(width, height)


def blur_sigma_map(height, width, gaze, fovea_radius, sigma_max, intensity):
    e = eccentricity(height, width, gaze)
    ramp = np.maximum(0.0, (e - fovea_radius) / (1.0 - fovea_radius))
    return intensity * sigma_max * ramp


def foveate(
    img: Image,
    gaze=(0.5, 0.5),
    fovea_radius: float = 0.15,
    sigma_max: float = 12.0,
    intensity: float = 1.0,
    seed: int = 0,
    n_levels: int = 8,
) -> Image:
    """Eccentricity-dependent pooling with texture re-synthesis.

    Each pixel is replaced by its Gaussian-pooled local mean plus a zero-mean
    +-1 texture scaled to the pooled local standard deviation, so the periphery
    keeps the first two local moments while losing exact structure. ``sigma_max``
    is in pixels. Pixels inside the fovea are returned untouched.
    """
    _require(img, "unit")
    if not (0 <= gaze[0] <= 1 and 0 <= gaze[1] <= 1):
        raise ContractError(f"gaze {gaze} outside [0,1]^2")
    h, w = img.height, img.width
    x = img.data
    sigma = blur_sigma_map(h, w, gaze, fovea_radius, sigma_max, intensity)
    top = float(sigma.max())
    if top <= 0.0:
        return Image(x.copy(), "unit")

    levels = np.linspace(0.0, top, n_levels)
    pos = sigma / (levels[1] - levels[0])
    lower = np.minimum(np.floor(pos).astype(int), n_levels - 2)
    frac = (pos - lower)[..., None]
    noise = _balanced_noise(h, w, seed)[..., None]

    out = np.zeros_like(x)
    for k, s in enumerate(levels):
        weight = np.where(lower == k, 1.0 - frac[..., 0], 0.0) + np.where(
            lower == k - 1, frac[..., 0], 0.0
        )
        if not weight.any():
            continue
        if s == 0.0:
            level_img = x
        else:
            mu = ndimage.gaussian_filter(x, sigma=(s, s, 0), mode="reflect")
            var = ndimage.gaussian_filter(x * x, sigma=(s, s, 0), mode="reflect") - mu * mu
            level_img = mu + np.sqrt(np.maximum(var, 0.0)) * noise
        out += weight[..., None] * level_img
    out = np.where((sigma == 0.0)[..., None], x, np.clip(out, 0.0, 1.0))
    return Image(out, "unit")


def _check_maps(img: Image, depth, segments):
    depth = np.asarray(depth, dtype=np.float64)
    segments = np.asarray(segments)
    if depth.shape != (img.height, img.width):
        raise ContractError(f"depth map {depth.shape} does not match image {img.shape[:2]}")
    if segments.shape != (img.height, img.width):
        raise ContractError(
            f"segment map {segments.shape} does not match image {img.shape[:2]}"
        )
    if not np.issubdtype(segments.dtype, np.integer) or (segments.size and segments.min() < 0):
        raise ContractError("segment labels must be non-negative integers")
    return depth, segments


def segment_mean_depth(depth, segments) -> np.ndarray:
    labels = segments.ravel()
    total = np.bincount(labels, weights=depth.ravel())
    count = np.bincount(labels)
    return np.divide(total, count, out=np.full(total.shape, np.nan), where=count > 0)


def chromostereopsis(
    img: Image,
    depth,
    segments,
    threshold: float = 0.5,
    hue_strength: float = 1.0,
    intensity: float = 1.0,
) -> Image:
    """Pull near segments' hue toward red and far segments' toward blue.

    A segment is near when its mean depth is strictly below ``threshold``.
    Hue moves along the shorter arc of the hue circle; S and V are kept.
    """
    _require(img, "unit")
    depth, segments = _check_maps(img, depth, segments)
    k = intensity * hue_strength
    if k == 0.0:
        return Image(img.data.copy(), "unit")
    mean_depth = segment_mean_depth(depth, segments)
    seg_hue = np.where(mean_depth < threshold, RED_HUE, BLUE_HUE)
    target = seg_hue[segments]
    hsv = rgb_to_hsv(img).data.copy()
    hue = hsv[..., 0]
    delta = np.mod(target - hue + 0.5, 1.0) - 0.5
    hsv[..., 0] = np.mod(target - (1.0 - k) * delta, 1.0)
    return hsv_to_rgb(Image(hsv, "unit", "HSV"))


# --- depth / segmentation providers -------------------------------------------


class GradientDepth:
    """Top of frame far (1), bottom near (0)."""

    provider_id = "gradient"

    def __call__(self, img: Image, name=None) -> np.ndarray:
        h, w = img.height, img.width
        col = 1.0 - np.arange(h, dtype=np.float64) / max(h - 1, 1)
        return np.repeat(col[:, None], w, axis=1)


@dataclass
class KMeansSegments:
    """Seeded k-means over (x, y, R, G, B)."""

    k: int = 8
    seed: int = 0
    iterations: int = 10
    provider_id: str = field(default="kmeans", init=False)

    def __call__(self, img: Image, name=None) -> np.ndarray:
        h, w = img.height, img.width
        rgb = img.to("unit").data.reshape(-1, 3)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        feats = np.column_stack([xx.ravel() / w, yy.ravel() / h, rgb])
        k = min(self.k, h * w)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, labels = kmeans2(
                feats, k, iter=self.iterations, minit="++",
                seed=np.random.default_rng(self.seed),
            )
        return relabel_contiguous(labels.reshape(h, w))


def relabel_contiguous(labels) -> np.ndarray:
    _, inverse = np.unique(np.asarray(labels), return_inverse=True)
    return inverse.reshape(np.shape(labels)).astype(np.int64)


@dataclass
class FileDepth:
    """8-bit single-channel PNGs named after the source image."""

    directory: Path
    provider_id: str = field(default="file", init=False)

    def __call__(self, img: Image, name=None) -> np.ndarray:
        if name is None:
            raise ContractError("file depth provider needs the source image name")
        return read_depth_png(Path(self.directory) / name)


@dataclass
class FileSegments:
    directory: Path
    provider_id: str = field(default="file", init=False)

    def __call__(self, img: Image, name=None) -> np.ndarray:
        if name is None:
            raise ContractError("file segment provider needs the source image name")
        return read_label_png(Path(self.directory) / name)


def read_depth_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.array(im.convert("L"), dtype=np.float64) / 255.0


def read_label_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ContractError(f"label map {path} must be single channel")
    return relabel_contiguous(arr)


def write_depth_png(depth, path):
    arr = np.floor(np.clip(np.asarray(depth), 0, 1) * 255 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="L").save(path)


def write_label_png(labels, path):
    labels = np.asarray(labels)
    mode = "L" if labels.max(initial=0) < 256 else "I;16"
    dtype = np.uint8 if mode == "L" else np.uint16
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(labels.astype(dtype), mode=mode).save(path)


@dataclass
class Providers:
    depth: object = field(default_factory=GradientDepth)
    segments: object = field(default_factory=KMeansSegments)


# --- pair synthesis -------------------------------------------------------------


def _blend_u8(degraded: Image, clean: Image, intensity: float) -> Image:
    """``lerp(degraded, clean, intensity)`` rounded back to 8 bits."""
    if intensity >= 1.0:
        return clean
    mix = (1.0 - intensity) * degraded.data.astype(np.float64) + intensity * clean.data
    return Image(np.floor(mix + 0.5).astype(np.uint8), "u8")


def _check_tasks(tasks: Sequence[TaskSpec]):
    if not tasks:
        raise ContractError("at least one task is required")
    kinds = [t.kind for t in tasks]
    if len(set(kinds)) != len(kinds):
        raise ContractError(f"duplicate task in {[k.value for k in kinds]}")
    return {t.kind: t.intensity for t in tasks}


def synthesize_pair(
    source: Image,
    tasks: Sequence[TaskSpec],
    params: EffectParams | None = None,
    providers: Providers | None = None,
    name=None,
):
    """Build the (input, target) training pair for a task combination.

    Degradations (quantize, then salt-and-pepper) go on the input; stylizations
    (chromostereopsis, then foveation) go on the target. A restoration task
    with intensity < 1 leaves part of its degradation in the target.
    """
    params = params or EffectParams()
    providers = providers or Providers()
    _require(source, "u8")
    wanted = _check_tasks(tasks)

    x = y = source
    if TaskKind.DRE in wanted:
        x = quantize_dynamic_range(x, params.quant_bits)
        y = _blend_u8(quantize_dynamic_range(y, params.quant_bits), y, wanted[TaskKind.DRE])
    if TaskKind.ID in wanted:
        x = add_salt_pepper(x, params.noise_density, params.seed)
        y = _blend_u8(add_salt_pepper(y, params.noise_density, params.seed), y, wanted[TaskKind.ID])

    # each stylization is u8 -> u8 so a combined target equals the single
    # oracles applied one after another
    if TaskKind.C in wanted:
        depth = providers.depth(source, name)
        segments = providers.segments(source, name)
        y = chromostereopsis(
            y.to("unit"), depth, segments, params.depth_threshold, params.hue_strength,
            wanted[TaskKind.C],
        ).to("u8")
    if TaskKind.F in wanted:
        y = foveate(
            y.to("unit"), params.gaze, params.fovea_radius,
            params.sigma_for(source.height, source.width), wanted[TaskKind.F],
            params.seed,
        ).to("u8")
    return x, y
