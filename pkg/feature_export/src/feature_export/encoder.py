"""Frozen image encoders. Features are the penultimate activations (global
average pool output) of a residual ImageNet classifier; the classifier head is
never applied and no gradient ever flows.

Weights policy: "auto" tries the published pretrained weights and falls back
to a seeded random initialization with a loud warning when the download is
unavailable (air-gapped machines); "none" skips the download entirely; a path
loads a state dict from disk. Either way the network is frozen, so exports are
deterministic for a given (encoder, weights, seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torchvision import models

# name -> (constructor, pretrained weight enum, penultimate width)
ENCODERS = {
    "resnet50": (models.resnet50, models.ResNet50_Weights.DEFAULT, 2048),
    "resnet18": (models.resnet18, models.ResNet18_Weights.DEFAULT, 512),
}

_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
_RESIZE = 256
_CROP = 224


class EncoderError(ValueError):
    """Unknown encoder name or unusable weights."""


@dataclass
class FrozenEncoder:
    name: str
    expected_width: int
    pretrained: bool
    _body: torch.nn.Module

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """[B, H, W, 3] uint8 RGB -> [B, width] float32."""
        if frames.ndim != 4 or frames.shape[3] != 3:
            raise EncoderError(f"expected [B, H, W, 3] frames, got {frames.shape}")
        with torch.no_grad():
            x = torch.stack([_preprocess(f) for f in frames])
            y = self._body(x)
        return y.reshape(y.shape[0], -1).numpy().astype(np.float32)


def _preprocess(frame: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).float() / 255.0
    h, w = x.shape[1], x.shape[2]
    scale = _RESIZE / min(h, w)
    nh, nw = max(_RESIZE, round(h * scale)), max(_RESIZE, round(w * scale))
    x = F.interpolate(x.unsqueeze(0), size=(nh, nw), mode="bilinear",
                      align_corners=False, antialias=True)
    top, left = (nh - _CROP) // 2, (nw - _CROP) // 2
    x = x[:, :, top:top + _CROP, left:left + _CROP]
    return ((x - _IMAGENET_MEAN) / _IMAGENET_STD).squeeze(0)


def load_encoder(name: str = "resnet50", weights: str = "auto",
                 seed: int = 0) -> FrozenEncoder:
    if name not in ENCODERS:
        raise EncoderError(f"unknown encoder {name!r}; "
                           f"available: {', '.join(sorted(ENCODERS))}")
    ctor, weight_enum, width = ENCODERS[name]

    pretrained = False
    if weights == "auto":
        try:
            net = ctor(weights=weight_enum)
            pretrained = True
        except Exception as e:  # download refused, offline, checksum, ...
            warnings.warn(
                f"pretrained weights for {name} unavailable ({e}); "
                f"falling back to an untrained frozen encoder seeded with {seed}. "
                f"Exported features are reproducible but not semantically "
                f"meaningful.", RuntimeWarning, stacklevel=2)
            torch.manual_seed(seed)
            net = ctor(weights=None)
    elif weights == "none":
        torch.manual_seed(seed)
        net = ctor(weights=None)
    else:
        p = Path(weights)
        if not p.exists():
            raise EncoderError(f"weights file not found: {p}")
        net = ctor(weights=None)
        try:
            net.load_state_dict(torch.load(p, map_location="cpu",
                                           weights_only=True))
        except Exception as e:
            raise EncoderError(f"cannot load weights from {p}: {e}")
        pretrained = True

    net.eval()
    for param in net.parameters():
        param.requires_grad_(False)
    body = torch.nn.Sequential(*list(net.children())[:-1])  # drop the fc head
    return FrozenEncoder(name=name, expected_width=width,
                         pretrained=pretrained, _body=body)
