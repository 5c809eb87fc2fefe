"""Export of the spatial attention maps produced by co-attentive units."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from casnet.backbone import SharingNetwork, forward
from casnet.data import Dataset
from casnet.errors import ConfigError
from casnet.pnm import read_pnm, to_uint8, write_pnm
from casnet.tensor import Tensor

log = logging.getLogger(__name__)


def map_filename(sample_id: str, layer: int, task: str) -> str:
    return f"{sample_id}_layer{layer}_task{task}.pgm"


def upscale(m: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour upscaling of an (h, w) map to ``size`` = (H, W)."""
    H, W = size
    h, w = m.shape
    rows = np.minimum((np.arange(H) * h) // H, h - 1)
    cols = np.minimum((np.arange(W) * w) // W, w - 1)
    return m[rows][:, cols]


def collect_maps(net: SharingNetwork, images: np.ndarray) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """``(layer, M_A, M_B)`` per co-attentive unit; maps are (N, h, w) arrays in (0, 1)."""
    if not isinstance(net, SharingNetwork) or not net.has_cas:
        raise ConfigError("network has no co-attentive unit to take maps from")
    _, _, maps = forward(net, Tensor(images))
    layers = [i + 1 for i, m in enumerate(net.modules) if m is not None]
    out = []
    for layer, (ma, mb) in zip(layers, maps):
        if ma is None:
            continue
        out.append((layer, ma.data[..., 0], mb.data[..., 0]))
    if not out:
        raise ConfigError("co-attentive units run without spatial attention; no maps to export")
    return out


def export_attention_maps(net: SharingNetwork, ds: Dataset, out_dir, indices=None,
                          batch_size: int = 50) -> list[Path]:
    """Write one PGM per sample, layer and task, upscaled to the input size.

    Values are quantised with ``round(m * 255)``, so re-reading a file and
    dividing by 255 recovers the map to within 1/510.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    size = ds.images.shape[1:3]
    written = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        for layer, ma, mb in collect_maps(net, ds.images[chunk]):
            for k, i in enumerate(chunk):
                for task, m in (("A", ma[k]), ("B", mb[k])):
                    path = out / map_filename(ds.ids[i], layer, task)
                    write_pnm(path, to_uint8(upscale(m, size))[..., None])
                    written.append(path)
    log.info("wrote %d attention maps to %s", len(written), out)
    return written


def read_map(path) -> np.ndarray:
    """Re-read an exported map as floats in [0, 1]."""
    img = read_pnm(path)
    return img[..., 0].astype(np.float64) / 255.0
