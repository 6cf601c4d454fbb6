"""The INR generator.

A convolutional hypernetwork turns the source image into a WeightGrid, one
flat parameter vector per patch; the MLP of every patch maps
``concat(gamma(x), s_x)`` to the target intensity of its own pixels.

Flat parameter vectors are layer-major: for each affine layer the (fan_in,
fan_out) weight matrix in row-major order, followed by its fan_out biases.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.diffcore import Tensor, as_tensor, constant, get_dtype, no_grad, parameter
from app.diffcore import ops
from app.errors import ChannelMismatchError, LayoutError, ShapeError
from app.geometry import EncodedCoords, PatchMap, encode_grid, partition, pixel_features
from app.schemas import HypernetConfig, MlpSpec, PatchGridSpec, TrainConfig

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class LayerSlot:
    index: int
    fan_in: int
    fan_out: int
    weight_offset: int
    bias_offset: int
    last: bool


@dataclass(frozen=True)
class MlpLayout:
    slots: Tuple[LayerSlot, ...]
    total: int


def mlp_param_layout(spec: MlpSpec) -> MlpLayout:
    widths = spec.widths
    slots: List[LayerSlot] = []
    offset = 0
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        slots.append(LayerSlot(
            index=i,
            fan_in=fan_in,
            fan_out=fan_out,
            weight_offset=offset,
            bias_offset=offset + fan_in * fan_out,
            last=i == len(widths) - 2,
        ))
        offset += fan_in * fan_out + fan_out
    return MlpLayout(slots=tuple(slots), total=offset)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, slope: float) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_mlp_vector(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    layout = mlp_param_layout(spec)
    flat = np.zeros(layout.total)
    for slot in layout.slots:
        slope = 1.0 if slot.last else spec.slope
        w = kaiming_uniform(rng, (slot.fan_in, slot.fan_out), slot.fan_in, slope)
        flat[slot.weight_offset:slot.bias_offset] = w.reshape(-1)
    return flat


@dataclass(frozen=True)
class DownsamplePlan:
    """Stride-2 stages followed by an average pool that lands on the patch grid."""

    stages: int
    pool: Tuple[int, int]

    @property
    def factor(self) -> int:
        return 2 ** self.stages


def _twos(n: int) -> int:
    return (n & -n).bit_length() - 1


def downsample_plan(height: int, width: int, grid: PatchGridSpec) -> DownsamplePlan:
    """As many halvings as both per-cell extents allow, the remainder pooled per axis."""
    if height % grid.rows or width % grid.cols:
        raise ShapeError("hypernet", f"{height}x{width} is not divisible into the {grid.label} patch grid")
    fh, fw = height // grid.rows, width // grid.cols
    stages = min(_twos(fh), _twos(fw))
    return DownsamplePlan(stages=stages, pool=(fh >> stages, fw >> stages))


def init_hypernet(
    cfg: HypernetConfig,
    spec: MlpSpec,
    stages: int,
    rng: np.random.Generator,
) -> Dict[str, Tensor]:
    """Parameters of the ``stages`` downsampling convolutions, the trunk and the 1x1 head."""
    params: Dict[str, Tensor] = {}
    channels = cfg.in_channels
    for k in range(stages):
        fan_in = channels * 16
        params[f"down.{k}.weight"] = parameter(
            kaiming_uniform(rng, (cfg.width, channels, 4, 4), fan_in, cfg.slope), f"down.{k}.weight")
        params[f"down.{k}.bias"] = parameter(np.zeros(cfg.width), f"down.{k}.bias")
        channels = cfg.width
    if stages and cfg.source_skip:
        channels += cfg.in_channels
    for k in range(cfg.trunk_blocks):
        params[f"trunk.{k}.weight"] = parameter(
            kaiming_uniform(rng, (cfg.width, channels, 3, 3), channels * 9, cfg.slope), f"trunk.{k}.weight")
        params[f"trunk.{k}.bias"] = parameter(np.zeros(cfg.width), f"trunk.{k}.bias")
        channels = cfg.width
    total = mlp_param_layout(spec).total
    params["head.weight"] = parameter(
        rng.normal(0.0, cfg.head_init_std, size=(total, channels, 1, 1)), "head.weight")
    params["head.bias"] = parameter(init_mlp_vector(spec, rng), "head.bias")
    return params


def hypernet_forward(
    source: ArrayLike,
    params: Mapping[str, Tensor],
    cfg: HypernetConfig,
    spec: MlpSpec,
    grid: PatchGridSpec,
) -> Tensor:
    """Source batch (B, m, H, W) -> WeightGrid tensor (B, M*N, P)."""
    x = constant(source)
    if x.ndim != 4:
        raise ShapeError("hypernet", f"expected (B, m, H, W) source, got {x.shape}")
    b, m, h, w = x.shape
    if m != cfg.in_channels:
        raise ChannelMismatchError(f"hypernetwork expects {cfg.in_channels} channels, source has {m}")
    stages = sum(1 for name in params if name.startswith("down.") and name.endswith(".weight"))
    plan = downsample_plan(h, w, grid)
    if plan.stages != stages:
        raise ShapeError(
            "hypernet",
            f"{h}x{w} over the {grid.label} patch grid needs {plan.stages} downsampling stages, "
            f"the parameters hold {stages}",
        )
    feat = x
    for k in range(stages):
        feat = ops.leaky_relu(
            ops.conv2d(feat, params[f"down.{k}.weight"], params[f"down.{k}.bias"], stride=2, padding=1),
            cfg.slope,
        )
    if stages and cfg.source_skip:
        feat = ops.concat([feat, ops.downsample(x, plan.factor)], axis=1)
    if plan.pool != (1, 1):
        feat = ops.avg_pool(feat, plan.pool)
    for k in range(cfg.trunk_blocks):
        feat = ops.leaky_relu(
            ops.conv2d(feat, params[f"trunk.{k}.weight"], params[f"trunk.{k}.bias"], stride=1, padding=1),
            cfg.slope,
        )
    head = ops.conv2d(feat, params["head.weight"], params["head.bias"])
    total = mlp_param_layout(spec).total
    if head.shape[1] != total:
        raise LayoutError("hypernet", f"head emits {head.shape[1]} parameters, MLP needs {total}")
    return ops.reshape(ops.transpose(head, (0, 2, 3, 1)), (b, grid.cells, total))


def local_mlp_eval(
    weights: ArrayLike,
    enc: EncodedCoords,
    source: ArrayLike,
    pmap: PatchMap,
    spec: MlpSpec,
) -> Tensor:
    """Evaluate every patch's MLP on its own pixels; returns (B, out, H, W) in (-1, 1)."""
    weights = as_tensor(weights)
    source = source.data if isinstance(source, Tensor) else np.asarray(source, dtype=weights.dtype)
    layout = mlp_param_layout(spec)
    if weights.ndim != 3 or weights.shape[1] != pmap.cells or weights.shape[2] != layout.total:
        raise LayoutError(
            "local_mlp",
            f"weight grid {weights.shape} does not match {pmap.cells} cells x {layout.total} parameters",
        )
    if source.shape[1] + enc.features.shape[-1] != spec.in_features:
        raise LayoutError(
            "local_mlp",
            f"{enc.features.shape[-1]} encoding + {source.shape[1]} source features != {spec.in_features} inputs",
        )
    b, k = weights.shape[:2]
    h = constant(pmap.to_patches(pixel_features(enc, source)))
    for slot in layout.slots:
        w = ops.reshape(
            ops.slice_axis(weights, -1, slot.weight_offset, slot.bias_offset), (b, k, slot.fan_in, slot.fan_out))
        bias = ops.reshape(
            ops.slice_axis(weights, -1, slot.bias_offset, slot.bias_offset + slot.fan_out), (b, k, 1, slot.fan_out))
        h = ops.add(ops.matmul(h, w), bias)
        h = ops.tanh(h) if slot.last else ops.leaky_relu(h, spec.slope)
    out = ops.reshape(h, (b, pmap.rows, pmap.cols, pmap.patch_height, pmap.patch_width, spec.out_features))
    out = ops.transpose(out, (0, 5, 1, 3, 2, 4))
    return ops.reshape(out, (b, spec.out_features, pmap.height, pmap.width))


def evaluate_mlp(flat: np.ndarray, features: np.ndarray, spec: MlpSpec) -> np.ndarray:
    """One MLP from its flat vector on a (..., F) feature array."""
    h = features
    for slot in mlp_param_layout(spec).slots:
        w = flat[slot.weight_offset:slot.bias_offset].reshape(slot.fan_in, slot.fan_out)
        h = h @ w + flat[slot.bias_offset:slot.bias_offset + slot.fan_out]
        h = np.tanh(h) if slot.last else np.where(h > 0, h, spec.slope * h)
    return h


def broadcast_cell(weights: np.ndarray, cell_index: int) -> np.ndarray:
    """A WeightGrid in which every cell carries the vector of ``cell_index``."""
    cells = weights.shape[1]
    if not 0 <= cell_index < cells:
        raise ShapeError("broadcast_cell", f"cell {cell_index} outside {cells} cells")
    return np.ascontiguousarray(np.repeat(weights[:, cell_index:cell_index + 1, :], cells, axis=1))


def generator_forward(
    source: ArrayLike,
    params: Mapping[str, Tensor],
    cfg: HypernetConfig,
    spec: MlpSpec,
    grid: PatchGridSpec,
    bands: int = 6,
    denominator: str = "extent_minus_one",
) -> Tensor:
    src = source.data if isinstance(source, Tensor) else np.asarray(source, dtype=get_dtype())
    _, _, h, w = src.shape
    weights = hypernet_forward(src, params, cfg, spec, grid)
    return local_mlp_eval(weights, encode_grid(h, w, bands, denominator), src, partition(h, w, grid), spec)


class Generator:
    """Hypernetwork parameters plus the fixed geometry of one image extent."""

    def __init__(
        self,
        hypernet: HypernetConfig,
        mlp: MlpSpec,
        grid: PatchGridSpec,
        height: int,
        width: int,
        bands: int = 6,
        denominator: str = "extent_minus_one",
        rng: Optional[np.random.Generator] = None,
        params: Optional[Dict[str, Tensor]] = None,
    ):
        self.hypernet_cfg = hypernet
        self.mlp = mlp
        self.grid = grid
        self.bands = bands
        self.denominator = denominator
        self.pmap = partition(height, width, grid)
        self.encoding = encode_grid(height, width, bands, denominator)
        self.layout = mlp_param_layout(mlp)
        if mlp.in_features != 4 * bands + hypernet.in_channels:
            raise LayoutError("generator", f"MLP input width {mlp.in_features} != 4*{bands} + {hypernet.in_channels}")
        self.plan = downsample_plan(height, width, grid)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = init_hypernet(hypernet, mlp, self.plan.stages, rng)
        self.params = params
        logger.debug("generator %s: %d hypernet parameters, P=%d per cell",
                     grid.label, self.parameter_count, self.layout.total)

    @classmethod
    def from_config(cls, cfg: TrainConfig, rng: np.random.Generator) -> "Generator":
        return cls(
            cfg.hypernet_config(), cfg.mlp_spec(), cfg.grid, cfg.crop_height, cfg.crop_width,
            bands=cfg.bands, denominator=cfg.coord_denominator, rng=rng,
        )

    @property
    def extent(self) -> Tuple[int, int]:
        return self.pmap.height, self.pmap.width

    @property
    def in_channels(self) -> int:
        return self.hypernet_cfg.in_channels

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _source(self, source: ArrayLike) -> np.ndarray:
        src = source.data if isinstance(source, Tensor) else np.asarray(source, dtype=get_dtype())
        if src.ndim == 3:
            src = src[None]
        return src

    def weight_grid(self, source: ArrayLike) -> Tensor:
        return hypernet_forward(self._source(source), self.params, self.hypernet_cfg, self.mlp, self.grid)

    def render(self, weights: ArrayLike, source: ArrayLike) -> Tensor:
        return local_mlp_eval(weights, self.encoding, self._source(source), self.pmap, self.mlp)

    def forward(self, source: ArrayLike) -> Tensor:
        src = self._source(source)
        return self.render(self.weight_grid(src), src)

    __call__ = forward

    def translate(self, source: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Inference without taping: (B, m, H, W) or (m, H, W) -> (B, out, H, W)."""
        src = self._source(source)
        outputs = []
        with no_grad():
            for start in range(0, src.shape[0], batch_size):
                outputs.append(self.forward(src[start:start + batch_size]).data)
        return np.concatenate(outputs, axis=0)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise LayoutError("generator", f"state mismatch on parameters {sorted(missing)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise LayoutError("generator", f"'{name}' has shape {state[name].shape}, expected {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype)

    def describe(self) -> dict:
        """The "mlp_spec" checkpoint section: everything needed to rebuild the model."""
        return {
            "mlp": self.mlp.model_dump(),
            "hypernet": self.hypernet_cfg.model_dump(),
            "grid": self.grid.model_dump(),
            "bands": self.bands,
            "denominator": self.denominator,
            "height": self.pmap.height,
            "width": self.pmap.width,
            "widths": self.mlp.widths,
        }

    @classmethod
    def from_description(cls, desc: Mapping, state: Optional[Mapping[str, np.ndarray]] = None) -> "Generator":
        gen = cls(
            HypernetConfig.model_validate(desc["hypernet"]),
            MlpSpec.model_validate(desc["mlp"]),
            PatchGridSpec.model_validate(desc["grid"]),
            int(desc["height"]),
            int(desc["width"]),
            bands=int(desc["bands"]),
            denominator=desc["denominator"],
        )
        if state is not None:
            gen.load_state_dict(state)
        return gen
