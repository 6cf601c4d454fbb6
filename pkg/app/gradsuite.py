"""Finite-difference checks for every primitive and for both networks at toy sizes."""

import logging
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

from app.diffcore import Tensor, constant, grad_check, parameter, precision
from app.diffcore import ops
from app.discriminator import Discriminator
from app.generator import Generator
from app.schemas import DiscConfig, GradCheckEntry, HypernetConfig, MlpSpec, PatchGridSpec

logger = logging.getLogger(__name__)

Case = Tuple[Callable[[], Tensor], Mapping[str, Tensor]]


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # kinks of relu / abs sit at 0; keep central differences on one side
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator, shape) -> Callable[[], Tensor]:
    """Scalar <R, f()> with a fixed random R, so every output entry matters."""
    weights = constant(rng.standard_normal(shape))
    return lambda: ops.sum_(ops.mul(out_fn(), weights))


def _bind(fn: Callable[..., Tensor], args: tuple) -> Callable[[Tensor], Tensor]:
    return lambda t: fn(t, *args)


def primitive_cases(rng: np.random.Generator) -> Dict[str, Case]:
    """One case per entry of :data:`ops.PRIMITIVES`, keyed by the same name."""
    op = ops.PRIMITIVES
    x = parameter(_away_from_zero(rng, (2, 3, 6, 6)), "x")
    y = parameter(rng.standard_normal((2, 3, 6, 6)), "y")
    a = parameter(rng.standard_normal((2, 4, 5)), "a")
    b = parameter(rng.standard_normal((2, 5, 3)), "b")
    v = parameter(rng.standard_normal((7, 5)), "v")
    w = parameter(rng.standard_normal((5, 3)), "w")
    bias = parameter(rng.standard_normal(3), "bias")
    kernel = parameter(rng.standard_normal((4, 3, 4, 4)) * 0.3, "kernel")
    kbias = parameter(rng.standard_normal(4), "kbias")
    labels = (rng.random((2, 3, 6, 6)) > 0.5).astype(np.float64)

    unary_args = {
        "relu": (),
        "leaky_relu": (0.2,),
        "tanh": (),
        "sin": (),
        "cos": (),
        "abs": (),
        "sigmoid_bce": (labels,),
        "downsample": (2,),
        "avg_pool": ((3, 2),),
        "reshape": ((2, 108),),
        "transpose": ((0, 2, 3, 1),),
        "slice": (1, 1, 3),
    }
    cases: Dict[str, Case] = {}
    for name, args in unary_args.items():
        fn = _bind(op[name], args)
        cases[name] = (_projected(lambda fn=fn: fn(x), rng, fn(x).shape), {"x": x})
    for name in ("add", "sub", "mul"):
        cases[name] = (_projected(lambda f=op[name]: f(x, y), rng, x.shape), {"x": x, "y": y})
    cases["concat"] = (_projected(lambda: op["concat"]([x, y], axis=1), rng, (2, 6, 6, 6)), {"x": x, "y": y})
    cases["matmul"] = (_projected(lambda: op["matmul"](a, b), rng, (2, 4, 3)), {"a": a, "b": b})
    cases["linear"] = (_projected(lambda: op["linear"](v, w, bias), rng, (7, 3)), {"v": v, "w": w, "bias": bias})

    def conv():
        return op["conv2d"](x, kernel, kbias, stride=2, padding=1)

    cases["conv2d"] = (_projected(conv, rng, conv().shape), {"x": x, "kernel": kernel, "kbias": kbias})
    cases["sum"] = (lambda: op["sum"](ops.mul(x, x)), {"x": x})
    cases["mean"] = (lambda: ops.sum_(op["mean"](ops.mul(y, y), axis=(2, 3))), {"y": y})
    return cases


def network_cases(rng: np.random.Generator) -> Dict[str, Case]:
    bands = 2
    hyper = HypernetConfig(in_channels=1, width=4, trunk_blocks=2, head_init_std=0.1)
    spec = MlpSpec(in_features=4 * bands + 1, hidden=4, layers=3)
    generator = Generator(hyper, spec, PatchGridSpec(rows=2, cols=2), 8, 8, bands=bands,
                          rng=np.random.default_rng(rng.integers(1 << 31)))
    source = rng.uniform(-1, 1, size=(2, 1, 8, 8))
    # 12x8 over one cell: two stride-2 stages, then a 3x2 pool
    pooled = Generator(hyper, spec, PatchGridSpec(rows=1, cols=1), 12, 8, bands=bands,
                       rng=np.random.default_rng(rng.integers(1 << 31)))
    wide_source = rng.uniform(-1, 1, size=(2, 1, 12, 8))

    disc = Discriminator(DiscConfig(in_channels=2, widths=(4, 4, 1), strides=(2, 1, 1)),
                         np.random.default_rng(rng.integers(1 << 31)), std=0.3)
    d_source = rng.uniform(-1, 1, size=(2, 1, 12, 12))
    d_target = rng.uniform(-1, 1, size=(2, 1, 12, 12))

    return {
        "generator": (lambda: ops.mean(generator(source)), generator.params),
        "generator_pooled": (lambda: ops.mean(pooled(wide_source)), pooled.params),
        "discriminator": (lambda: ops.mean(disc(d_source, d_target)), disc.params),
    }


def gradient_suite(
    seed: int = 0,
    eps: float = 1e-5,
    threshold: float = 1e-4,
    max_entries: int = 24,
) -> List[GradCheckEntry]:
    """Run every case at 64-bit and flatten the reports to one entry per parameter."""
    entries: List[GradCheckEntry] = []
    with precision(64):
        rng = np.random.default_rng(seed)
        cases = {**primitive_cases(rng), **network_cases(rng)}
        for target, (fn, params) in cases.items():
            report = grad_check(fn, params, eps=eps, threshold=threshold, max_entries=max_entries,
                                rng=np.random.default_rng(seed))
            for name, err in report.max_relative_error.items():
                entries.append(GradCheckEntry(
                    target=target,
                    parameter=name,
                    max_relative_error=err,
                    checked_entries=report.checked_entries[name],
                    passed=err <= threshold,
                ))
            logger.debug("grad check %s: worst %.2e", target, report.worst)
    return entries
