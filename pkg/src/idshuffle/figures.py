"""PNG grid rendering for generation and retrieval figures.

Grids are rows x columns of equally sized cells with optional colored
borders (retrieval hit/miss marking) and a mandatory footer line that ties
the figure back to its run (config hash, checkpoint stage/epoch).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

FOOTER_HEIGHT = 14
BORDER = 2


def tensor_to_uint8(img) -> np.ndarray:
    """Convert an image in [-1, 1] ([3,H,W] tensor or [H,W,3] array) to uint8."""
    arr = img.detach().cpu().numpy() if torch.is_tensor(img) else np.asarray(img)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D image, got shape {arr.shape}")
    if arr.shape[0] == 3 and arr.shape[2] != 3:
        arr = np.transpose(arr, (1, 2, 0))
    elif arr.shape[0] == 3 and arr.shape[2] == 3 and torch.is_tensor(img):
        arr = np.transpose(arr, (1, 2, 0))
    return np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)


def image_grid(rows: list[list[np.ndarray]], footer: str = "",
               borders: list[list[tuple | None]] | None = None,
               scale: int = 2, pad: int = 3) -> Image.Image:
    """Assemble uint8 (H, W, 3) cells into one labeled grid image."""
    if not rows or not rows[0]:
        raise ValueError("grid needs at least one cell")
    cell_h, cell_w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    out_w = pad + n_cols * (cell_w * scale + pad)
    out_h = pad + len(rows) * (cell_h * scale + pad) + (FOOTER_HEIGHT if footer else 0)
    canvas = Image.new("RGB", (out_w, out_h), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    for r, row in enumerate(rows):
        for c, cell in enumerate(row):
            if cell.shape[:2] != (cell_h, cell_w):
                raise ValueError("all grid cells must share one size")
            x = pad + c * (cell_w * scale + pad)
            y = pad + r * (cell_h * scale + pad)
            tile = Image.fromarray(cell).resize(
                (cell_w * scale, cell_h * scale), Image.NEAREST)
            canvas.paste(tile, (x, y))
            border = borders[r][c] if borders is not None else None
            if border is not None:
                for off in range(BORDER):
                    draw.rectangle([x + off, y + off,
                                    x + cell_w * scale - 1 - off,
                                    y + cell_h * scale - 1 - off], outline=border)
    if footer:
        draw.text((pad, out_h - FOOTER_HEIGHT + 2), footer, fill=(235, 235, 235))
    return canvas


def save_grid(path: str | Path, rows, footer: str = "", borders=None,
              scale: int = 2) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_grid(rows, footer=footer, borders=borders, scale=scale).save(path)
    return path
