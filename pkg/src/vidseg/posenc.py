"""Non-parametric sinusoidal positional encodings.

The temporal and spatial encodings are built independently and combined by
broadcast addition, so the temporal offset between two frames is the same
vector at every spatial location and vice versa. Being closed-form in the
position index, they extend to any clip length without retraining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BASE = 10000.0


@dataclass
class PositionalEncoding:
    """Temporal, spatial and combined encodings for a T x H x W grid."""

    e_pos_t: Tensor   # [T, 1, 1, C]
    e_pos_xy: Tensor  # [1, H, W, C]
    e_pos: Tensor     # [T, H, W, C]


def sinusoidal_1d(length: int, width: int, dtype=np.float32) -> Tensor:
    """Classic interleaved sin/cos table: out[p, 2i] = sin(p / BASE^(2i/width)),
    out[p, 2i+1] = cos of the same angle."""
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    if width < 2 or width % 2 != 0:
        raise ValueError(f"width must be even and positive, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    exponents = np.arange(0, width, 2, dtype=np.float64) / width
    angles = pos / np.power(BASE, exponents)
    out = np.zeros((length, width), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return Tensor(out.astype(dtype))


def spatial_2d(h: int, w: int, width: int, dtype=np.float32) -> Tensor:
    """2D encoding: first half of the channels encodes the row index, second
    half the column index, each as a 1D sinusoid broadcast across the other axis."""
    if width % 4 != 0:
        raise ValueError(f"width must be divisible by 4, got {width}")
    rows = sinusoidal_1d(h, width // 2, dtype=dtype).data
    cols = sinusoidal_1d(w, width // 2, dtype=dtype).data
    out = np.zeros((1, h, w, width), dtype=dtype)
    out[0, :, :, : width // 2] = rows[:, None, :]
    out[0, :, :, width // 2:] = cols[None, :, :]
    return Tensor(out)


def combined_3d(t: int, h: int, w: int, width: int, dtype=np.float32) -> PositionalEncoding:
    """Broadcast sum of a full-width temporal encoding over a full-width
    spatial encoding, giving one vector per (t, x, y) cell."""
    e_pos_t = T.reshape(sinusoidal_1d(t, width, dtype=dtype), (t, 1, 1, width))
    e_pos_xy = spatial_2d(h, w, width, dtype=dtype)
    e_pos = T.broadcast_add(e_pos_t, e_pos_xy)
    return PositionalEncoding(e_pos_t=e_pos_t.detach(), e_pos_xy=e_pos_xy, e_pos=e_pos.detach())
