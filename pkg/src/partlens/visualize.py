"""Filter visualization: top-activating receptive-field crops per filter."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import PartlensError
from .explainer import ExplainerNet
from .performer import CONV_STRIDES, PerformerNet
from .training import precompute_taps


@dataclass(frozen=True)
class ReceptiveField:
    size: int  # input pixels seen by one output cell
    stride: int  # input pixels between adjacent output cells
    offset: float  # input-pixel center of output cell (0, 0)

    def center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (self.offset + cell[0] * self.stride, self.offset + cell[1] * self.stride)


def stack_receptive_field(layers: list[tuple[int, int, int]]) -> ReceptiveField:
    """Receptive field of a conv stack given (kernel, stride, padding) per layer."""
    size, jump, offset = 1, 1, 0.0
    for kernel, stride, padding in layers:
        size += (kernel - 1) * jump
        offset += ((kernel - 1) / 2 - padding) * jump
        jump *= stride
    return ReceptiveField(size=size, stride=jump, offset=offset)


def performer_receptive_field(performer: PerformerNet, layer: int | None = None) -> ReceptiveField:
    arch = performer.arch
    layer = arch.tap_layer if layer is None else layer
    pad = arch.kernel // 2
    return stack_receptive_field(
        [(arch.kernel, CONV_STRIDES[i], pad) for i in range(layer)]
    )


def explainer_receptive_field(performer: PerformerNet, explainer: ExplainerNet) -> ReceptiveField:
    arch = performer.arch
    pad = arch.kernel // 2
    k = explainer.arch.kernel
    layers = [(arch.kernel, CONV_STRIDES[i], pad) for i in range(arch.tap_layer)]
    layers += [(k, 1, k // 2)] * 2  # two shape-preserving interpretable convs
    return stack_receptive_field(layers)


def _crop(image: np.ndarray, center: tuple[float, float], size: int) -> np.ndarray:
    s = image.shape[-1]
    half = size // 2
    r = int(round(center[0]))
    c = int(round(center[1]))
    r = min(max(r, half), s - 1 - half)
    c = min(max(c, half), s - 1 - half)
    return image[r - half : r + half + 1, c - half : c + half + 1]


def _grid_image(crops: list[np.ndarray], cols: int = 3, upscale: int = 3) -> Image.Image:
    """Assemble crops row-major into a grid with 1px separators."""
    size = crops[0].shape[0]
    rows = (len(crops) + cols - 1) // cols
    canvas = np.zeros((rows * (size + 1) + 1, cols * (size + 1) + 1), dtype=np.uint8)
    canvas[:] = 64
    for i, crop in enumerate(crops):
        r, c = divmod(i, cols)
        top = r * (size + 1) + 1
        left = c * (size + 1) + 1
        canvas[top : top + size, left : left + size] = np.round(crop * 255).astype(
            np.uint8
        )
    img = Image.fromarray(canvas, mode="L")
    return img.resize(
        (canvas.shape[1] * upscale, canvas.shape[0] * upscale), Image.NEAREST
    )


def _top_crops_per_filter(
    maps: np.ndarray,
    images: np.ndarray,
    rf: ReceptiveField,
    top_k: int,
) -> list[list[np.ndarray]]:
    """For each filter, receptive-field crops of its top-activating images.

    Crops are centered on the map argmax (the mask center for interpretable
    filters). Ranking is by peak activation, ties to the lower image index.
    """
    num_filters = maps.shape[1]
    out = []
    for f in range(num_filters):
        peaks = maps[:, f].reshape(len(maps), -1).max(axis=1)
        order = np.argsort(-peaks, kind="stable")[:top_k]
        crops = []
        for i in order:
            flat = int(np.argmax(maps[i, f]))
            cell = (flat // maps.shape[-1], flat % maps.shape[-1])
            crops.append(_crop(images[i, 0], rf.center(cell), rf.size))
        out.append(crops)
    return out


def visualize_filters(
    performer: PerformerNet,
    explainer: ExplainerNet,
    images: np.ndarray,
    out_dir: Path | str,
    *,
    top_k: int = 9,
) -> dict[str, list[Path]]:
    """Write one crop-grid PNG per explainer filter and per performer channel."""
    out_dir = Path(out_dir)
    written = {"explainer": [], "performer": []}
    feats = precompute_taps(performer, images)
    with torch.no_grad():
        premask = []
        for lo in range(0, len(images), 64):
            trace = explainer.encode(feats["x_tap"][lo : lo + 64])
            premask.append(trace.per_filter_premask)
        premask = torch.cat(premask).numpy()
    taps = feats["x_tap"].numpy()

    jobs = [
        ("explainer", premask, explainer_receptive_field(performer, explainer)),
        ("performer", taps, performer_receptive_field(performer)),
    ]
    for name, maps, rf in jobs:
        sub = out_dir / name
        try:
            sub.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PartlensError(f"cannot create {sub}: {exc}") from exc
        for f, crops in enumerate(_top_crops_per_filter(maps, images, rf, top_k)):
            path = sub / f"filter_{f:02d}.png"
            try:
                _grid_image(crops).save(path)
            except OSError as exc:
                raise PartlensError(f"cannot write {path}: {exc}") from exc
            written[name].append(path)
    return written
