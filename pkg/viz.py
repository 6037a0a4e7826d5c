from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from PIL import Image

from imc_io import MAX_INTENSITY

logger = logging.getLogger(__name__)

GUTTER = 4
BACKGROUND = "#1E1E1E"
AXIS_COLOR = "#8B8B8B"
SPINE_COLOR = "#333333"
BAR_COLORS = ("#00FF9F", "#00B3FF", "#FFB000", "#FF4F81")


class OverlayMode(Enum):
    ATTRIBUTION = "attribution"
    SIGNAL = "signal"


class DisplayNorm(Enum):
    UNIT_MAX = "unit_max"
    PERCENTILE = "percentile"


class MapNorm(Enum):
    SYMMETRIC_PERCENTILE = "symmetric_percentile"
    ABSMAX = "absmax"


class Colormap(Enum):
    DIVERGING = "diverging"
    GRAYSCALE = "grayscale"


@dataclass
class OverlayImage:
    pixels: np.ndarray
    legend: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"Overlay pixels must be H x W x 3 uint8, got {self.pixels.dtype} {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape


def _diverging_lut():
    ramp = np.arange(256, dtype=np.uint8)
    return np.stack([ramp, ramp, 255 - ramp], axis=-1)


DIVERGING_LUT = _diverging_lut()
GRAYSCALE_LUT = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)


def _to_byte(fraction):
    return np.rint(255.0 * np.clip(fraction, 0.0, 1.0)).astype(np.uint8)


def display_normalize(grid, norm=DisplayNorm.UNIT_MAX, percentile=99.0):
    """
    Maps a raw intensity grid to 0-255.

    unit_max divides by 65535. percentile stretches so the given percentile
    (or the maximum, when that percentile is 0) becomes 255.
    """
    grid = np.asarray(grid, dtype=np.float64)
    norm = DisplayNorm(norm)
    if norm is DisplayNorm.UNIT_MAX:
        return _to_byte(grid / MAX_INTENSITY)
    top = np.percentile(grid, percentile)
    if top <= 0:
        top = grid.max()
    if top <= 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return _to_byte(grid / top)


def _magnitude(relevance_map):
    values = np.abs(relevance_map.values)
    return values.sum(axis=-1) if values.ndim == 3 else values


def _signed(relevance_map):
    values = relevance_map.values
    return values.sum(axis=-1) if values.ndim == 3 else values


def render_overlay(membrane, mito_mass, relevance_map=None, mode=OverlayMode.ATTRIBUTION, display=DisplayNorm.UNIT_MAX):
    """
    Composes (R, G, B) = (membrane, mitochondrial mass, |map|).

    In signal mode the blue plane stays black and the map is shown on its
    own. The blue plane is rint(255 * |m| / max |m|), summed over channels.

    Raises:
        ValueError: On mismatched grid shapes or a map given in signal mode
            (or missing in attribution mode).
    """
    mode = OverlayMode(mode)
    membrane = np.asarray(membrane)
    mito_mass = np.asarray(mito_mass)
    if membrane.shape != mito_mass.shape or membrane.ndim != 2:
        raise ValueError(f"Membrane {membrane.shape} and mitochondrial mass {mito_mass.shape} grids differ")
    if (relevance_map is not None) != (mode is OverlayMode.ATTRIBUTION):
        raise ValueError("A relevance map is required in attribution mode and not allowed in signal mode")

    blue = np.zeros(membrane.shape, dtype=np.uint8)
    legend = {"R": "membrane", "G": "mitochondrial mass", "B": "black"}
    provenance = {}
    if relevance_map is not None:
        magnitude = _magnitude(relevance_map)
        if magnitude.shape != membrane.shape:
            raise ValueError(f"Map {magnitude.shape} does not match grids {membrane.shape}")
        peak = magnitude.max()
        if peak > 0:
            blue = np.rint(255.0 * magnitude / peak).astype(np.uint8)
        legend["B"] = f"|{relevance_map.method}|"
        provenance = {"patch": relevance_map.patch_ref, "method": str(relevance_map.method)}

    pixels = np.stack(
        [display_normalize(membrane, display), display_normalize(mito_mass, display), blue], axis=-1
    )
    return OverlayImage(pixels, legend, provenance)


def render_map(relevance_map, norm=MapNorm.SYMMETRIC_PERCENTILE, colormap=Colormap.DIVERGING, percentile=99.0):
    """
    Colors a signed map; zero sits at the middle of the scale.

    Values are scaled by the p-th percentile of |values| (symmetric_percentile)
    or the largest |value| (absmax), clipped to [-1, 1] and looked up in a
    256-level blue-to-yellow (diverging) or gray ramp.
    """
    norm = MapNorm(norm)
    colormap = Colormap(colormap)
    signed = _signed(relevance_map)
    magnitude = np.abs(signed)
    scale = magnitude.max() if norm is MapNorm.ABSMAX else np.percentile(magnitude, percentile)
    if scale > 0:
        position = 0.5 + 0.5 * np.clip(signed / scale, -1.0, 1.0)
    else:
        position = np.full(signed.shape, 0.5)
    index = np.rint(255.0 * position).astype(np.intp)
    lut = DIVERGING_LUT if colormap is Colormap.DIVERGING else GRAYSCALE_LUT
    return OverlayImage(
        lut[index],
        legend={"colormap": colormap.value, "norm": norm.value, "scale": float(scale)},
        provenance={"patch": relevance_map.patch_ref, "method": str(relevance_map.method)},
    )


def render_input(grid, display=DisplayNorm.PERCENTILE):
    """Gray rendering of the model input; multi-channel patches show their channel mean."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 3:
        grid = grid.mean(axis=-1)
    gray = display_normalize(grid, display)
    return OverlayImage(np.repeat(gray[..., None], 3, axis=-1), legend={"gray": "input"})


def render_triptych(input_image, overlay, map_image, gutters=True):
    """Places overlay | input | map side by side, with 4-px white gutters unless disabled."""
    panels = [overlay.pixels, input_image.pixels, map_image.pixels]
    heights = {p.shape[0] for p in panels}
    if len(heights) != 1:
        raise ValueError(f"Panel heights differ: {sorted(heights)}")
    if gutters:
        gutter = np.full((panels[0].shape[0], GUTTER, 3), 255, dtype=np.uint8)
        panels = [panels[0], gutter, panels[1], gutter, panels[2]]
    return OverlayImage(
        np.concatenate(panels, axis=1),
        legend={"left": "overlay", "middle": "input", "right": "map"},
        provenance=dict(map_image.provenance),
    )


def save_png(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.pixels).save(path, format="PNG")
    return path


def plot_metric_agreement(frame, metric_columns, path, title):
    """
    Grouped bar chart of the given metric columns, one group per model row.

    `frame` needs a `label` column naming each group. Written as PNG in the
    dark theme used across the project.
    """
    fig = Figure(figsize=(max(6, 0.6 * len(frame) + 2), 3.5), dpi=150, facecolor=BACKGROUND, constrained_layout=True)
    ax = fig.add_subplot(111)
    ax.set_facecolor(BACKGROUND)
    positions = np.arange(len(frame))
    width = 0.8 / max(len(metric_columns), 1)
    for k, column in enumerate(metric_columns):
        ax.bar(
            positions + (k - (len(metric_columns) - 1) / 2) * width,
            frame[column].to_numpy(),
            width=width,
            color=BAR_COLORS[k % len(BAR_COLORS)],
            label=column,
        )
    ax.set_xticks(positions)
    ax.set_xticklabels(frame["label"], rotation=45, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_title(title, color=AXIS_COLOR, fontsize=10)
    ax.tick_params(colors=AXIS_COLOR, labelsize=7)
    for name, spine in ax.spines.items():
        spine.set_visible(name == "bottom")
        spine.set_color(SPINE_COLOR)
    ax.legend(fontsize=7, facecolor=BACKGROUND, edgecolor=SPINE_COLOR, labelcolor=AXIS_COLOR)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, facecolor=BACKGROUND, metadata={"Software": None})
    logger.debug("Wrote %s", path)
    return path
