"""Preprocessing for blood-smear cell images.

Pipeline: decode, bilinear resize to 75x75, 7x7 Gaussian blur, Canny edge
detection with thresholds 80/160, then assembly of the model input tensor.
Borders are handled by replication throughout; grayscale conversion uses
Rec.601 weights.
"""

from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import FormatError, ParameterError
from .tensor_core import Tensor

INPUT_MODES = ("rgb", "edges", "rgb_plus_edge")


@dataclass(frozen=True)
class Image:
    """8-bit image, row-major, interleaved channels; pixels shape (H, W, C)."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise FormatError(f"unsupported channel count {self.channels}")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise FormatError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}")
        if self.pixels.dtype != np.uint8:
            raise FormatError("pixels must be 8-bit unsigned")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Image":
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        h, w, c = pixels.shape
        return cls(width=w, height=h, channels=c, pixels=pixels)


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: tuple[int, int] = (75, 75)
    gaussian_kernel_size: int = 7
    gaussian_sigma: float = 1.4
    canny_low: float = 80.0
    canny_high: float = 160.0
    input_mode: str = "rgb_plus_edge"

    def __post_init__(self):
        if self.gaussian_kernel_size % 2 == 0 or self.gaussian_kernel_size < 1:
            raise ParameterError("gaussian kernel size must be odd and positive")
        if self.gaussian_sigma <= 0:
            raise ParameterError("gaussian sigma must be > 0")
        if not 0 < self.canny_low < self.canny_high <= 255:
            raise ParameterError("canny thresholds must satisfy 0 < low < high <= 255")
        if self.input_mode not in INPUT_MODES:
            raise ParameterError(f"input_mode must be one of {INPUT_MODES}")


def decode_image(data: bytes) -> Image:
    """Decode PNG or JPEG bytes to an RGB or grayscale Image."""
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FormatError(f"cannot decode image: {exc}") from exc
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise FormatError("image has a zero dimension")
    return Image.from_array(arr)


def encode_png(image: Image) -> bytes:
    """PNG bytes for an Image (debug dumps, overlays, HTTP responses)."""
    arr = image.pixels[:, :, 0] if image.channels == 1 else image.pixels
    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center mapping; float64 result.

    Works on (H, W) or (H, W, C) float arrays; shared by the uint8 image
    path and heatmap upsampling.
    """
    h, w = arr.shape[0], arr.shape[1]
    sy = h / out_h
    sx = w / out_w
    ys = (np.arange(out_h) + 0.5) * sy - 0.5
    xs = (np.arange(out_w) + 0.5) * sx - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)

    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    fy = fy.reshape(-1, 1) if arr.ndim == 2 else fy.reshape(-1, 1, 1)
    fx = fx.reshape(1, -1) if arr.ndim == 2 else fx.reshape(1, -1, 1)
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(image: Image, out_w: int, out_h: int) -> Image:
    """Resize with bilinear interpolation and half-pixel-center mapping."""
    if out_w < 1 or out_h < 1:
        raise ParameterError("output dims must be positive")
    if out_w == image.width and out_h == image.height:
        return Image.from_array(image.pixels.copy())
    out = _bilinear_resize(image.pixels.astype(np.float64), out_h, out_w)
    return Image.from_array(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel (sums to 1)."""
    if size % 2 == 0 or size < 1:
        raise ParameterError(f"kernel size must be odd, got {size}")
    if sigma <= 0:
        raise ParameterError("sigma must be > 0")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _replicate_pad2d(arr: np.ndarray, r: int) -> np.ndarray:
    return np.pad(arr, ((r, r), (r, r)), mode="edge")


def gaussian_blur(image: Image, config: PreprocessConfig) -> Image:
    """Per-channel Gaussian smoothing with replicated borders."""
    kernel = gaussian_kernel(config.gaussian_kernel_size, config.gaussian_sigma)
    r = config.gaussian_kernel_size // 2
    out = np.empty_like(image.pixels)
    for c in range(image.channels):
        padded = _replicate_pad2d(image.pixels[:, :, c].astype(np.float64), r)
        win = sliding_window_view(padded, kernel.shape)
        blurred = np.einsum("hwuv,uv->hw", win, kernel, optimize=True)
        out[:, :, c] = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    return Image.from_array(out)


def _rec601_gray(pixels: np.ndarray) -> np.ndarray:
    if pixels.shape[2] == 1:
        return pixels[:, :, 0].astype(np.float64)
    p = pixels.astype(np.float64)
    return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)

# Per direction sector: the two magnitude neighbors compared during NMS,
# as (dy, dx) offsets. A pixel survives when m > before and m >= after,
# which breaks the two-pixel tie a perfect step edge produces.
_SECTOR_NEIGHBORS = (
    ((0, -1), (0, 1)),      # ~horizontal gradient
    ((-1, -1), (1, 1)),     # ~45 degrees
    ((-1, 0), (1, 0)),      # ~vertical gradient
    ((-1, 1), (1, -1)),     # ~135 degrees
)


def canny_stages(image: Image, low: float, high: float) -> dict[str, np.ndarray]:
    """All intermediate maps of the edge detector.

    Returns gradient components, L2 magnitude, direction sectors, the
    pre-hysteresis NMS mask, strong/weak masks, and the final edge map.
    """
    if not 0 < low < high:
        raise ParameterError(f"thresholds must satisfy 0 < low < high, got {low}/{high}")
    gray = _rec601_gray(image.pixels)
    padded = _replicate_pad2d(gray, 1)
    win = sliding_window_view(padded, (3, 3))
    gx = np.einsum("hwuv,uv->hw", win, _SOBEL_X, optimize=True)
    gy = np.einsum("hwuv,uv->hw", win, _SOBEL_Y, optimize=True)
    mag = np.hypot(gx, gy)

    theta = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(theta.shape, dtype=np.int8)
    sector[(theta >= 22.5) & (theta < 67.5)] = 1
    sector[(theta >= 67.5) & (theta < 112.5)] = 2
    sector[(theta >= 112.5) & (theta < 157.5)] = 3

    h, w = mag.shape
    nms = np.zeros((h, w), dtype=bool)
    # interior only; border pixels are suppressed
    for s, ((dy1, dx1), (dy2, dx2)) in enumerate(_SECTOR_NEIGHBORS):
        m = mag[1:-1, 1:-1]
        before = mag[1 + dy1:h - 1 + dy1, 1 + dx1:w - 1 + dx1]
        after = mag[1 + dy2:h - 1 + dy2, 1 + dx2:w - 1 + dx2]
        keep = (sector[1:-1, 1:-1] == s) & (m > 0) & (m > before) & (m >= after)
        nms[1:-1, 1:-1] |= keep

    strong = nms & (mag >= high)
    weak = nms & (mag >= low) & (mag < high)
    edges = strong.copy()
    stack = deque(zip(*np.nonzero(strong)))
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and weak[yy, xx] and not edges[yy, xx]:
                    edges[yy, xx] = True
                    stack.append((yy, xx))

    return {"gx": gx, "gy": gy, "magnitude": mag, "sector": sector,
            "nms": nms, "strong": strong, "weak": weak, "edges": edges}


def canny(image: Image, low: float, high: float) -> Image:
    """Binary edge map {0, 255}: Sobel gradients, non-maximum suppression,
    and double thresholding with connected hysteresis."""
    stages = canny_stages(image, low, high)
    return Image.from_array(np.where(stages["edges"], 255, 0).astype(np.uint8))


def build_input_tensor(image: Image, config: PreprocessConfig) -> Tensor:
    """Model input from a raw image: (1, C, H, W) float32 in [0, 1].

    C is 3 for rgb, 1 for edges, 4 for rgb_plus_edge (resized RGB plus the
    edge map from the blurred image).
    """
    tw, th = config.target_size
    resized = resize_bilinear(image, tw, th)
    rgb = resized.pixels
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)

    planes: list[np.ndarray] = []
    if config.input_mode in ("rgb", "rgb_plus_edge"):
        planes.extend(rgb[:, :, c] for c in range(3))
    if config.input_mode in ("edges", "rgb_plus_edge"):
        blurred = gaussian_blur(resized, config)
        edge = canny(blurred, config.canny_low, config.canny_high)
        planes.append(edge.pixels[:, :, 0])

    stacked = np.stack(planes, axis=0).astype(np.float32) / np.float32(255.0)
    return Tensor(stacked[None, :, :, :], copy=False)


def input_channels(mode: str) -> int:
    """Channel count the classifier sees for a given input mode."""
    return {"rgb": 3, "edges": 1, "rgb_plus_edge": 4}[mode]
