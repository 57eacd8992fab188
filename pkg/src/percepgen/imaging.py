"""Raster images, colour/domain conversion, PNG I/O and full-reference metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb as _hsv_to_rgb
from matplotlib.colors import rgb_to_hsv as _rgb_to_hsv
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ContractError, DomainError

DOMAINS = ("u8", "unit", "signed")
COLORSPACES = ("RGB", "HSV")
_BOUNDS = {"u8": (0, 255), "unit": (0.0, 1.0), "signed": (-1.0, 1.0)}
_PEAK = {"u8": 255.0, "unit": 1.0, "signed": 2.0}


@dataclass(frozen=True, eq=False)
class Image:
    """An H x W x 3 raster tagged with its value domain and colour space.

    ``u8`` data is stored as ``uint8``; ``unit`` and ``signed`` as ``float64``.
    """

    data: np.ndarray
    domain: str = "u8"
    colorspace: str = "RGB"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DomainError(f"unknown domain {self.domain!r}")
        if self.colorspace not in COLORSPACES:
            raise DomainError(f"unknown colorspace {self.colorspace!r}")
        if self.colorspace == "HSV" and self.domain != "unit":
            raise DomainError("HSV images must use the unit domain")
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ContractError(f"expected HxWx3 data, got shape {data.shape}")
        if self.domain == "u8":
            if data.dtype != np.uint8:
                raise DomainError(f"u8 images need uint8 data, got {data.dtype}")
        else:
            data = data.astype(np.float64, copy=False)
            lo, hi = _BOUNDS[self.domain]
            if data.size and not (np.all(data >= lo) and np.all(data <= hi)):
                raise DomainError(
                    f"values outside [{lo}, {hi}] for domain {self.domain!r}"
                )
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def shape(self):
        return self.data.shape

    def to(self, domain: str) -> "Image":
        """Convert to another value domain (RGB images only)."""
        if domain == self.domain:
            return self
        if self.colorspace != "RGB":
            raise DomainError("domain conversion is only defined for RGB images")
        return Image(_convert(self.data, self.domain, domain), domain)

    def equals(self, other: "Image") -> bool:
        return (
            self.domain == other.domain
            and self.colorspace == other.colorspace
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @classmethod
    def from_unit(cls, data, domain="unit") -> "Image":
        """Build an image in ``domain`` from [0, 1] float data (clipped)."""
        unit = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
        return cls(_convert(unit, "unit", domain), domain)


def _convert(data, src, dst):
    if src == "u8":
        unit = data.astype(np.float64) / 255.0
    elif src == "signed":
        unit = np.clip((data + 1.0) / 2.0, 0.0, 1.0)
    else:
        unit = data
    if dst == "u8":
        return np.floor(np.clip(unit, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if dst == "signed":
        return np.clip(unit * 2.0 - 1.0, -1.0, 1.0)
    return unit


def rgb_to_hsv(img: Image) -> Image:
    """RGB -> HSV, all channels in [0, 1]; hue 1.0 corresponds to 360 degrees."""
    if img.domain != "unit" or img.colorspace != "RGB":
        raise DomainError("rgb_to_hsv expects a unit-domain RGB image")
    hsv = _rgb_to_hsv(img.data)
    # guard against hue landing on exactly 1.0 through rounding
    hsv[..., 0] = np.where(hsv[..., 0] >= 1.0, 0.0, hsv[..., 0])
    return Image(hsv, "unit", "HSV")


def hsv_to_rgb(img: Image) -> Image:
    if img.domain != "unit" or img.colorspace != "HSV":
        raise DomainError("hsv_to_rgb expects a unit-domain HSV image")
    rgb = np.clip(_hsv_to_rgb(img.data), 0.0, 1.0)
    return Image(rgb, "unit", "RGB")


def _check_pair(a: Image, b: Image):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.domain != b.domain:
        raise ContractError(f"domain mismatch: {a.domain} vs {b.domain}")


def peak_value(domain: str) -> float:
    """Peak-to-peak signal range used as MAX in PSNR and SSIM."""
    return _PEAK[domain]


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    _check_pair(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    peak = _PEAK[a.domain]
    return 10.0 * np.log10(peak * peak / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(x, w):
    # separable correlation, keep only positions where the window fits
    r = len(w) // 2
    out = ndimage.correlate1d(x, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    return out[r : x.shape[0] - r, r : x.shape[1] - r]


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM, Gaussian 11x11 window (sigma 1.5), per channel then averaged."""
    _check_pair(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ContractError(
            f"image {a.width}x{a.height} is smaller than the {SSIM_WINDOW}px SSIM window"
        )
    peak = _PEAK[a.domain]
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    w = gaussian_window_1d()
    scores = []
    for ch in range(3):
        x = a.data[..., ch].astype(np.float64)
        y = b.data[..., ch].astype(np.float64)
        mx = _filter_valid(x, w)
        my = _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float

    def as_dict(self):
        return {"psnr_db": self.psnr_db, "ssim": self.ssim}


def compare(a: Image, b: Image) -> MetricReport:
    return MetricReport(psnr(a, b), ssim(a, b))


def read_png(path) -> Image:
    with PILImage.open(path) as im:
        return Image(np.array(im.convert("RGB"), dtype=np.uint8), "u8")


def write_png(img: Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(img.to("u8").data, mode="RGB").save(path, format="PNG")
    return path


def encode_png(img: Image) -> bytes:
    import io

    buf = io.BytesIO()
    PILImage.fromarray(img.to("u8").data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> Image:
    import io

    with PILImage.open(io.BytesIO(data)) as im:
        return Image(np.array(im.convert("RGB"), dtype=np.uint8), "u8")


def resize_center_crop(img: Image, size: int) -> Image:
    """Scale the short side to ``size`` then crop the centre square."""
    h, w = img.height, img.width
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    pil = PILImage.fromarray(img.to("u8").data).resize((nw, nh), PILImage.BICUBIC)
    top, left = (nh - size) // 2, (nw - size) // 2
    arr = np.array(pil)[top : top + size, left : left + size]
    return Image(np.ascontiguousarray(arr), "u8")
