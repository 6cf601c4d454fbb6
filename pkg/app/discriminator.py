"""Conditional PatchGAN discriminator D(s, t)."""

from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from app.diffcore import Tensor, as_tensor, parameter
from app.diffcore import ops
from app.errors import ShapeError
from app.schemas import DiscConfig

ArrayLike = Union[np.ndarray, Tensor]


def logit_map_size(height: int, width: int, cfg: DiscConfig) -> Tuple[int, int]:
    for stride in cfg.strides:
        height = ops.conv2d_output_size(height, cfg.kernel, stride, cfg.padding)
        width = ops.conv2d_output_size(width, cfg.kernel, stride, cfg.padding)
    return height, width


def receptive_field(y: int, x: int, cfg: DiscConfig) -> Tuple[slice, slice]:
    """Input rows/cols that can influence logit (y, x), clipped at zero."""
    lo_y, hi_y, lo_x, hi_x = y, y, x, x
    for stride in reversed(cfg.strides):
        lo_y, hi_y = lo_y * stride - cfg.padding, hi_y * stride - cfg.padding + cfg.kernel - 1
        lo_x, hi_x = lo_x * stride - cfg.padding, hi_x * stride - cfg.padding + cfg.kernel - 1
    return slice(max(lo_y, 0), hi_y + 1), slice(max(lo_x, 0), hi_x + 1)


def init_discriminator(cfg: DiscConfig, rng: np.random.Generator, std: float = 0.02) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    channels = cfg.in_channels
    for k, width in enumerate(cfg.widths):
        params[f"block.{k}.weight"] = parameter(
            rng.normal(0.0, std, size=(width, channels, cfg.kernel, cfg.kernel)), f"block.{k}.weight")
        params[f"block.{k}.bias"] = parameter(np.zeros(width), f"block.{k}.bias")
        channels = width
    return params


def discriminator_forward(
    source: ArrayLike,
    target: ArrayLike,
    params: Mapping[str, Tensor],
    cfg: DiscConfig,
) -> Tensor:
    """Logit map (B, 1, h', w') judging the pair channel-concatenated as (s, t)."""
    source, target = as_tensor(source), as_tensor(target)
    if source.ndim != 4 or target.ndim != 4:
        raise ShapeError("discriminator", f"expected NCHW inputs, got {source.shape} and {target.shape}")
    if source.shape[0] != target.shape[0] or source.shape[2:] != target.shape[2:]:
        raise ShapeError("discriminator", f"source {source.shape} and target {target.shape} disagree")
    if source.shape[1] + target.shape[1] != cfg.in_channels:
        raise ShapeError(
            "discriminator", f"{source.shape[1]}+{target.shape[1]} channels, expected {cfg.in_channels}")
    out_h, out_w = logit_map_size(source.shape[2], source.shape[3], cfg)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            "discriminator", f"input {source.shape[2]}x{source.shape[3]} is too small for the convolution stack")
    h = ops.concat([source, target], axis=1)
    last = len(cfg.widths) - 1
    for k, stride in enumerate(cfg.strides):
        h = ops.conv2d(h, params[f"block.{k}.weight"], params[f"block.{k}.bias"], stride=stride, padding=cfg.padding)
        if k != last:
            h = ops.leaky_relu(h, cfg.slope)
    return h


def inject_noise(image: ArrayLike, sigma: float, rng: np.random.Generator) -> ArrayLike:
    """``image + sigma * N(0, 1)``; tensors stay on the tape, arrays stay arrays."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return image
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    noise = (sigma * rng.standard_normal(data.shape)).astype(data.dtype)
    if isinstance(image, Tensor):
        return ops.add(image, noise)
    return data + noise


class Discriminator:
    def __init__(self, cfg: DiscConfig, rng: Optional[np.random.Generator] = None,
                 params: Optional[Dict[str, Tensor]] = None, std: float = 0.02):
        self.cfg = cfg
        self.params = params if params is not None else init_discriminator(
            cfg, rng if rng is not None else np.random.default_rng(0), std)

    def forward(self, source: ArrayLike, target: ArrayLike) -> Tensor:
        return discriminator_forward(source, target, self.params, self.cfg)

    __call__ = forward

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ShapeError("discriminator", "state does not match the configured blocks")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ShapeError("discriminator", f"'{name}' has shape {state[name].shape}, expected {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype)
