"""Gradient-weighted response heatmaps for routing nodes and leaves.

A site names the feature map entering a node: ``node:<level>:<pos>`` (the
root map is ``node:1:1``) or ``leaf:<i>`` as shorthand for the map feeding
leaf i.  Channel weights are the spatial means of d final[target] / d map;
the weighted, rectified sum is normalized to max 1 (an all-zero map stays
zero and is flagged degenerate) and upsampled nearest-neighbor to the
input size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as dataio
from .autodiff import Tape, Tensor, as_tensor, backward, select_rows, tsum
from .errors import InputError
from .tree import TreeModel


@dataclass
class Heatmap:
    values: np.ndarray     # [S, S] in [0, 1]
    site: str
    target_class: int
    method: str = "gradcam"
    degenerate: bool = False


def parse_site(site: str, height: int) -> tuple[int, int]:
    parts = site.split(":")
    try:
        if parts[0] == "node" and len(parts) == 3:
            k, i = int(parts[1]), int(parts[2])
        elif parts[0] == "leaf" and len(parts) == 2:
            k, i = height, int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise InputError(f"unknown site '{site}' (expected node:<k>:<i> or "
                         f"leaf:<i>)") from None
    if not (1 <= k <= height and 1 <= i <= 2 ** (k - 1)):
        raise InputError(f"site '{site}' outside a height-{height} tree")
    return k, i


def all_sites(height: int) -> list:
    """Routing-node sites then leaf sites, in level order."""
    sites = [f"node:{k}:{i}" for k in range(1, height)
             for i in range(1, 2 ** (k - 1) + 1)]
    sites += [f"leaf:{i}" for i in range(1, 2 ** (height - 1) + 1)]
    return sites


def _upsample_nearest(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = m.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return m[rows][:, cols]


def grad_cam(model: TreeModel, image: Tensor, target_class: int, site: str) -> Heatmap:
    """Heatmap over one (preprocessed) image, [1,3,S,S]."""
    image = as_tensor(image)
    if image.ndim != 4 or image.shape[0] != 1:
        raise InputError(f"grad_cam expects a single [1,3,S,S] image, got {image.shape}")
    if not 0 <= target_class < model.config.num_classes:
        raise InputError(f"target class {target_class} outside "
                         f"[0,{model.config.num_classes})")
    key = parse_site(site, model.config.height)

    with Tape() as tape:
        pred = model.forward(image, training=False, collect_maps=True)
        score = tsum(select_rows(pred.final, np.array([target_class])))
    backward(score)
    fmap = pred.maps[key]
    grad = fmap.grad if fmap.grad is not None else np.zeros_like(fmap.data)
    tape.reset()
    model.zero_grad()

    weights = grad.mean(axis=(2, 3))                       # [1, C]
    cam = (weights[:, :, None, None] * fmap.data).sum(axis=1)[0]
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    degenerate = not peak > 0.0
    if not degenerate:
        cam = cam / peak
    size = image.shape[2], image.shape[3]
    values = _upsample_nearest(cam, *size)
    return Heatmap(values=values, site=site, target_class=target_class,
                   degenerate=degenerate)


def write_pgm(heatmap: Heatmap, path) -> None:
    """Export as binary PGM, maxval 255, value = round(255 * v)."""
    dataio.write_pgm(path, heatmap.values)
