"""PNG rendering: explanation overlays, attribution heatmaps, and the
prototype gallery.

A fixed 20-hue palette cycles by prototype id so segment colors stay
stable across runs and match the gallery borders.  Attribution heatmaps
are affinely normalized per image (red = high, blue = low); the raw,
unnormalized values always live in the persisted NPY, with min/max in the
sidecar.  Gallery patches are the training rows nearest each prototype,
cropped around their grid cell with a 2x context factor.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .attribution import AttributionMap
from .bank import PrototypeBank
from .encoder_explainer import ExplanationMap, upsample_bilinear
from .errors import ConfigurationError, ValidationError
from .tensor_store import DatasetManifest

# 20 visually distinct hues (tab20 order), indexed by prototype id % 20.
PALETTE: tuple[tuple[int, int, int], ...] = (
    (31, 119, 180), (174, 199, 232), (255, 127, 14), (255, 187, 120),
    (44, 160, 44), (152, 223, 138), (214, 39, 40), (255, 152, 150),
    (148, 103, 189), (197, 176, 213), (140, 86, 75), (196, 156, 148),
    (227, 119, 194), (247, 182, 210), (127, 127, 127), (199, 199, 199),
    (188, 189, 34), (219, 219, 141), (23, 190, 207), (158, 218, 229),
)

GALLERY_PATCH_SIZE = 64
GALLERY_BORDER = 4
GALLERY_COLUMNS = 10
PATCH_CONTEXT_FACTOR = 2.0


def prototype_color(prototype_id: int) -> tuple[int, int, int]:
    return PALETTE[prototype_id % len(PALETTE)]


def load_image(path: str | Path) -> np.ndarray:
    """(H, W, 3) uint8 RGB."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _nearest_ids(ids: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = ids.shape
    th, tw = target
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return ids[rows][:, cols]


def explanation_overlay(image: np.ndarray, emap: ExplanationMap, alpha: float = 0.5) -> Image.Image:
    """Blend the nearest-neighbor-upsampled segment colors over the image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside [0, 1]")
    ids = _nearest_ids(emap.assignments, image.shape[:2])
    palette = np.array(PALETTE, dtype=np.float64)
    colors = palette[ids % len(PALETTE)]
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * colors
    return Image.fromarray(np.clip(blended, 0, 255).astype(np.uint8))


def _diverging_colors(unit: np.ndarray) -> np.ndarray:
    """Blue (0) -> white (0.5) -> red (1) colormap, vectorized."""
    unit = np.clip(unit, 0.0, 1.0)
    low = unit[..., None] * 2.0  # 0..1 on the blue half
    blue_half = np.concatenate([low * 255, low * 255, np.full_like(low, 255.0)], axis=-1)
    high = (unit[..., None] - 0.5) * 2.0  # 0..1 on the red half
    red_half = np.concatenate(
        [np.full_like(high, 255.0), (1.0 - high) * 255, (1.0 - high) * 255], axis=-1
    )
    return np.where(unit[..., None] <= 0.5, blue_half, red_half)


def attribution_overlay(image: np.ndarray, att: AttributionMap, alpha: float = 0.5) -> Image.Image:
    """Red-high / blue-low heatmap blended over the image.

    Values are affinely mapped to [0, 1] per image; a constant map renders
    mid-gray-white (0.5).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside [0, 1]")
    values = att.values.astype(np.float64)
    span = float(values.max() - values.min())
    unit = np.full_like(values, 0.5) if span == 0.0 else (values - values.min()) / span
    unit = upsample_bilinear(unit, image.shape[:2])
    colors = _diverging_colors(unit)
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * colors
    return Image.fromarray(np.clip(blended, 0, 255).astype(np.uint8))


def _crop_patch(image: np.ndarray, grid: tuple[int, int], cell: tuple[int, int]) -> np.ndarray:
    """Crop the receptive-field-aligned square around a grid cell.

    The square is the cell's image footprint scaled by the context factor,
    clamped to image bounds.  ``cell == (-1, -1)`` means a pooled-space
    prototype; the whole image is its patch.
    """
    if cell == (-1, -1):
        return image
    img_h, img_w = image.shape[:2]
    grid_h, grid_w = grid
    cell_h, cell_w = img_h / grid_h, img_w / grid_w
    center_y = (cell[0] + 0.5) * cell_h
    center_x = (cell[1] + 0.5) * cell_w
    half = max(cell_h, cell_w) * PATCH_CONTEXT_FACTOR / 2.0
    y0, y1 = int(max(0, round(center_y - half))), int(min(img_h, round(center_y + half)))
    x0, x1 = int(max(0, round(center_x - half))), int(min(img_w, round(center_x + half)))
    return image[max(y0, 0):max(y1, y0 + 1), max(x0, 0):max(x1, x0 + 1)]


def prototype_gallery(
    manifest: DatasetManifest,
    bank: PrototypeBank,
    prototype_ids: list[int],
    grid: tuple[int, int],
) -> Image.Image:
    """Tile, for each listed prototype, its nearest training patch framed
    in the prototype's palette color."""
    if bank.nearest_rows is None:
        raise ConfigurationError(
            "bank records no nearest training rows; refit with provenance to render a gallery"
        )
    if not prototype_ids:
        raise ValidationError("no prototypes to render")
    tiles = []
    for pid in prototype_ids:
        sample_id, row, col = bank.nearest_rows[pid]
        image = load_image(manifest.image_path(sample_id))
        patch = _crop_patch(image, grid, (row, col))
        tile = Image.fromarray(patch).resize(
            (GALLERY_PATCH_SIZE, GALLERY_PATCH_SIZE), Image.BILINEAR
        )
        framed = Image.new(
            "RGB",
            (GALLERY_PATCH_SIZE + 2 * GALLERY_BORDER, GALLERY_PATCH_SIZE + 2 * GALLERY_BORDER),
            prototype_color(pid),
        )
        framed.paste(tile, (GALLERY_BORDER, GALLERY_BORDER))
        tiles.append(framed)

    columns = min(len(tiles), GALLERY_COLUMNS)
    rows = (len(tiles) + columns - 1) // columns
    tile_side = GALLERY_PATCH_SIZE + 2 * GALLERY_BORDER
    sheet = Image.new("RGB", (columns * tile_side, rows * tile_side), (255, 255, 255))
    for i, tile in enumerate(tiles):
        sheet.paste(tile, ((i % columns) * tile_side, (i // columns) * tile_side))
    return sheet
