"""Gabor orientation energy, non-max suppressed contour features, scale pyramid."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import convolve, gaussian_filter

from compvocab.config import FeatureSettings, settings
from compvocab.exceptions import FeatureExtractionError

logger = logging.getLogger(__name__)

_LUMA = np.array([0.299, 0.587, 0.114])
_FLAT_ENERGY = 1e-9

# 8-neighbour step along the energy gradient, per quantized filter angle
# (0, 45, 90, 135 degrees; x right, y down)
_NORMAL_STEPS = ((1, 0), (1, 1), (0, 1), (-1, 1))


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GaborBankConfig:
    wavelength: float = 6.0
    aspect: float = 0.75
    sigma: float = 2.0
    phases: tuple[float, float] = (0.0, -math.pi / 2)
    num_orientations: int = 6

    def __post_init__(self) -> None:
        if self.num_orientations < 2:
            raise FeatureExtractionError("num_orientations must be >= 2")
        if min(self.wavelength, self.aspect, self.sigma) <= 0:
            raise FeatureExtractionError("wavelength, aspect and sigma must be positive")

    @classmethod
    def from_settings(cls, cfg: FeatureSettings | None = None) -> GaborBankConfig:
        cfg = cfg or settings.features
        return cls(
            wavelength=cfg.wavelength,
            aspect=cfg.aspect,
            sigma=cfg.sigma,
            num_orientations=cfg.num_orientations,
        )

    @property
    def radius(self) -> int:
        return math.ceil(3 * self.sigma / min(1.0, self.aspect))


@dataclass(frozen=True)
class GaborKernel:
    orientation: int
    angle: float  # psi, radians
    phase: float
    values: np.ndarray = field(repr=False)


@dataclass
class EnergyVolume:
    values: np.ndarray  # (height, width, n), normalized to [0, 1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_orientations(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class OrientedFeature:
    x: int
    y: int
    energies: np.ndarray = field(repr=False)

    @property
    def location(self) -> tuple[int, int]:
        return self.x, self.y

    @property
    def dominant_orientation(self) -> int:
        return int(np.argmax(self.energies))


@dataclass
class FeatureSet:
    """Columnar feature storage; `features` materializes OrientedFeature views."""

    locations: np.ndarray  # (N, 2) int64, columns x, y
    energies: np.ndarray   # (N, n) float64
    width: int
    height: int
    scale_index: int = 0

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def num_orientations(self) -> int:
        return self.energies.shape[1]

    @property
    def dominant(self) -> np.ndarray:
        return np.argmax(self.energies, axis=1) if len(self) else np.zeros(0, dtype=np.int64)

    @property
    def features(self) -> list[OrientedFeature]:
        return [
            OrientedFeature(int(x), int(y), e)
            for (x, y), e in zip(self.locations, self.energies)
        ]

    @classmethod
    def empty(cls, width: int, height: int, n: int, scale_index: int = 0) -> FeatureSet:
        return cls(np.zeros((0, 2), np.int64), np.zeros((0, n)), width, height, scale_index)


# ── Helpers ───────────────────────────────────────────────────────────────────

def orientation_angle(index: int, n: int) -> float:
    return index * math.pi / n


def contour_angle(index: int, n: int) -> float:
    """Direction of the contour the filter at `index` responds to."""
    return (orientation_angle(index, n) + math.pi / 2) % math.pi


def to_grayscale(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ _LUMA if arr.shape[2] >= 3 else arr[..., 0]
    if arr.ndim != 2:
        raise FeatureExtractionError(f"unsupported image shape {np.shape(image)}")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Grayscale float image in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
                return arr
            arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    except (OSError, ValueError) as exc:
        raise FeatureExtractionError(f"cannot read image {path}: {exc}") from exc
    return to_grayscale(arr) / 255.0


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    img = Image.fromarray(np.asarray(image, dtype=np.float32))
    return np.asarray(img.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float64)


# ── Operations ────────────────────────────────────────────────────────────────

def build_gabor_bank(config: GaborBankConfig) -> list[GaborKernel]:
    """Zero-mean even/odd kernel pair per orientation psi_i = i*pi/n."""
    half = config.radius
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    bank: list[GaborKernel] = []
    for i in range(config.num_orientations):
        psi = orientation_angle(i, config.num_orientations)
        u = x * math.cos(psi) + y * math.sin(psi)
        v = -x * math.sin(psi) + y * math.cos(psi)
        envelope = np.exp(-(u ** 2 + config.aspect ** 2 * v ** 2) / (2 * config.sigma ** 2))
        for phase in config.phases:
            k = envelope * np.cos(2 * math.pi * u / config.wavelength + phase)
            bank.append(GaborKernel(i, psi, phase, k - k.mean()))
    return bank


def orientation_energy(image: np.ndarray, bank: list[GaborKernel]) -> EnergyVolume:
    image = to_grayscale(image)
    if image.size == 0:
        raise FeatureExtractionError("empty image")
    side = bank[0].values.shape[0]
    if min(image.shape) < side:
        raise FeatureExtractionError(
            f"image {image.shape[1]}x{image.shape[0]} smaller than kernel support {side}"
        )
    n = max(k.orientation for k in bank) + 1
    responses: dict[int, list[np.ndarray]] = {}
    for kernel in bank:
        responses.setdefault(kernel.orientation, []).append(
            convolve(image, kernel.values, mode="reflect")
        )
    energy = np.stack(
        [np.sqrt(sum(r ** 2 for r in responses[i])) for i in range(n)], axis=2
    )
    peak = energy.max()
    # zero-mean kernels leave only rounding residue on flat input
    if peak > _FLAT_ENERGY * max(1.0, float(np.abs(image).max())):
        energy /= peak
    else:
        energy = np.zeros_like(energy)
    return EnergyVolume(energy)


def suppress_nonmax(volume: EnergyVolume, min_energy: float, border: int) -> np.ndarray:
    """Boolean keep-mask: dominant energy is a maximum along the contour normal."""
    e = volume.values
    h, w, n = e.shape
    dominant = np.argmax(e, axis=2)
    top = np.take_along_axis(e, dominant[..., None], axis=2)[..., 0]
    padded = np.pad(e, ((1, 1), (1, 1), (0, 0)), mode="constant")
    yy, xx = np.mgrid[0:h, 0:w]
    step_idx = np.round(dominant * (180.0 / n) / 45.0).astype(np.int64) % 4
    steps = np.array(_NORMAL_STEPS)
    dx = steps[step_idx, 0]
    dy = steps[step_idx, 1]
    ahead = padded[yy + dy + 1, xx + dx + 1, dominant]
    behind = padded[yy - dy + 1, xx - dx + 1, dominant]
    keep = (top >= ahead) & (top > behind) & (top >= min_energy) & (top > 0)
    if border > 0:
        keep[:border, :] = False
        keep[-border:, :] = False
        keep[:, :border] = False
        keep[:, -border:] = False
    return keep


def extract_features(
    image: np.ndarray,
    config: GaborBankConfig | None = None,
    min_energy: float | None = None,
    scale_index: int = 0,
) -> FeatureSet:
    config = config or GaborBankConfig.from_settings()
    min_energy = settings.features.min_energy if min_energy is None else min_energy
    image = to_grayscale(image)
    volume = orientation_energy(image, build_gabor_bank(config))
    keep = suppress_nonmax(volume, min_energy, config.radius)
    ys, xs = np.nonzero(keep)  # row-major: sorted by (y, x)
    locations = np.stack([xs, ys], axis=1).astype(np.int64)
    energies = volume.values[ys, xs, :]
    logger.debug(
        "Extracted %d features from %dx%d image (scale %d)",
        len(locations), image.shape[1], image.shape[0], scale_index,
    )
    return FeatureSet(locations, energies, image.shape[1], image.shape[0], scale_index)


def dump_energy(volume: EnergyVolume, out_dir: str | Path, stem: str = "energy") -> list[Path]:
    """Debug dump: one 8-bit PNG per orientation layer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(volume.num_orientations):
        path = out_dir / f"{stem}_o{i}.png"
        layer = np.clip(np.round(volume.values[..., i] * 255), 0, 255).astype(np.uint8)
        Image.fromarray(layer).save(path)
        paths.append(path)
    return paths


def pyramid_sizes(width: int, height: int, scales_per_octave: int, levels: int | None, floor: int) -> list[tuple[int, int]]:
    ratio = 2 ** (1 / scales_per_octave)
    sizes = []
    k = 0
    while levels is None or k < levels:
        size = (round(width / ratio ** k), round(height / ratio ** k))
        if k > 0 and min(size) < max(floor, 1):
            break
        sizes.append(size)
        k += 1
    return sizes


def build_pyramid(
    image: np.ndarray,
    scales_per_octave: int | None = None,
    levels: int | None = None,
    floor: int | None = None,
    blur_factor: float | None = None,
) -> list[np.ndarray]:
    cfg = settings.features
    scales_per_octave = scales_per_octave or cfg.scales_per_octave
    floor = cfg.pyramid_floor if floor is None else floor
    blur_factor = cfg.blur_factor if blur_factor is None else blur_factor
    if scales_per_octave < 1:
        raise FeatureExtractionError("scales_per_octave must be >= 1")
    image = to_grayscale(image)
    h, w = image.shape
    ratio = 2 ** (1 / scales_per_octave)
    sizes = pyramid_sizes(w, h, scales_per_octave, levels, floor)
    pyramid = [image.copy()]
    for size in sizes[1:]:
        blurred = gaussian_filter(pyramid[-1], sigma=blur_factor * ratio, mode="reflect")
        pyramid.append(resize_image(blurred, *size))
    return pyramid
