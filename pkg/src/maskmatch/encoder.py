from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor
from .utils import ConfigError, ContractError, DimensionError, derive_rng

STRIDES = (4, 8, 16, 32)
_ENCODER_STREAM = 101


@dataclass
class FeaturePyramid:
    F2: Tensor
    F3: Tensor
    F4: Tensor
    F5: Tensor

    @property
    def levels(self) -> List[Tensor]:
        """Matching levels 3..5 (strides 8, 16, 32)."""
        return [self.F3, self.F4, self.F5]

    @property
    def channels(self) -> int:
        return self.F2.shape[0]

    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in (self.F2, self.F3, self.F4, self.F5)]


def _conv3x3_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    out = np.einsum("chwij,ocij->ohw", win, w) + b[:, None, None]
    return np.maximum(out, 0.0)


class Encoder:
    """Frozen stack of stride-2 3x3 convolutions + ReLU.

    Two stages reach stride 4 (F2), then one stage per level gives F3, F4, F5.
    Weights are drawn once from ``seed`` and stored read-only.
    """

    def __init__(self, channels: int = 32, seed: int = 0, in_channels: int = 3):
        self.channels = channels
        self.seed = seed
        rng = derive_rng(seed, _ENCODER_STREAM)
        widths = [in_channels, channels, channels, channels, channels, channels]
        self._stages: List[Tuple[np.ndarray, np.ndarray]] = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            b = np.zeros(cout)
            w.setflags(write=False)
            b.setflags(write=False)
            self._stages.append((w, b))

    def encode(self, image: Union[Tensor, np.ndarray], requires_grad: bool = False) -> FeaturePyramid:
        if requires_grad:
            raise ContractError("encoder is frozen: gradients cannot be requested through encode()")
        x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != 3:
            raise DimensionError(f"encode expects a [3 x H x W] image, got {x.shape}")
        _, h, w = x.shape
        if h % 32 or w % 32:
            raise ConfigError("image_size", f"H and W must be divisible by 32, got {h}x{w}")
        feats = []
        for i, (wt, bias) in enumerate(self._stages):
            x = _conv3x3_s2(x, wt, bias)
            if i >= 1:
                feats.append(Tensor(x))
        return FeaturePyramid(*feats)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for w, b in self._stages:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()
