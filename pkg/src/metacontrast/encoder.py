"""Per-frame MLP encoder with temporal mean pooling.

Each frame is flattened and pushed through affine -> ReLU -> affine; the
per-frame features are averaged over time and scaled to unit norm inside
the graph, so every consumer downstream sees unit vectors and gradients
flow through the normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .synth import VIEW_RES, VIEW_RGB

__all__ = ["EncoderConfig", "Embedding", "init_encoder", "encode", "encoder_prefix"]


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and initialisation of the encoder.

    ``input_dims`` is (T, H, W, C) of one view. When ``shared_views`` is
    false the two views get independent parameter groups; nothing else
    changes.
    """

    input_dims: tuple[int, int, int, int]
    hidden_width: int = 32
    embed_dim: int = 16
    init_scale: float = 1.0
    shared_views: bool = True

    def __post_init__(self) -> None:
        if len(self.input_dims) != 4 or any(d < 1 for d in self.input_dims):
            raise ValueError(f"input_dims must be four positive ints, got {self.input_dims}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.hidden_width < self.embed_dim:
            raise ValueError(
                f"hidden_width ({self.hidden_width}) must be >= embed_dim ({self.embed_dim})"
            )
        if self.init_scale < 0.0:
            raise ValueError(f"init_scale must be non-negative, got {self.init_scale}")

    @property
    def frame_dim(self) -> int:
        _, h, w, c = self.input_dims
        return h * w * c

    @property
    def n_params(self) -> int:
        per_tower = ((self.frame_dim + 1) * self.hidden_width
                     + (self.hidden_width + 1) * self.embed_dim)
        return per_tower if self.shared_views else 2 * per_tower


@dataclass(frozen=True)
class Embedding:
    """A detached embedding with its provenance."""

    vector: np.ndarray
    clip_id: int
    view_tag: str


def encoder_prefix(params: ad.ParamSet, view_tag: str) -> str:
    """Parameter-name prefix used for a view: shared or per-view tower."""
    if "enc.w1" in params:
        return "enc"
    if view_tag not in (VIEW_RGB, VIEW_RES):
        raise ValueError(f"unknown view tag {view_tag!r}")
    return f"enc_{view_tag}"


def init_encoder(config: EncoderConfig, seed: int) -> ad.ParamSet:
    """Fresh encoder parameters.

    Weights are uniform in +/- init_scale/sqrt(fan_in); biases start at
    zero. With ``init_scale`` zero the encoder is a degenerate constant
    map (every clip gets the same embedding), kept reachable because
    tests use it as a negative control.
    """
    rng = np.random.default_rng(seed)
    d = config.frame_dim
    prefixes = ["enc"] if config.shared_views else ["enc_rgb", "enc_res"]
    entries: dict[str, np.ndarray] = {}
    for prefix in prefixes:
        bound1 = config.init_scale / np.sqrt(d)
        bound2 = config.init_scale / np.sqrt(config.hidden_width)
        entries[f"{prefix}.w1"] = rng.uniform(-bound1, bound1, size=(d, config.hidden_width))
        entries[f"{prefix}.b1"] = np.zeros(config.hidden_width)
        entries[f"{prefix}.w2"] = rng.uniform(-bound2, bound2, size=(config.hidden_width, config.embed_dim))
        entries[f"{prefix}.b2"] = np.zeros(config.embed_dim)
    return ad.ParamSet(entries)


def encode(params: ad.ParamSet, config: EncoderConfig, view: np.ndarray,
           view_tag: str = VIEW_RGB) -> ad.Node:
    """Encode one (T, H, W, C) view to a unit-norm embedding node."""
    view = np.asarray(view, dtype=np.float64)
    if view.shape != tuple(config.input_dims):
        raise ValueError(
            f"encode: view shape {view.shape} does not match configured dims {tuple(config.input_dims)}"
        )
    prefix = encoder_prefix(params, view_tag)
    t = view.shape[0]
    x = ad.Node(view.reshape(t, -1))
    hidden = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    per_frame = ad.add(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    pooled = ad.reduce_mean(per_frame, axis=0)
    return ad.l2_normalize(pooled, axis=-1)
