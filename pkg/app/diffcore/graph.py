import inspect
from typing import Callable, Dict, Mapping, Optional, Union

import numpy as np

from app.diffcore.tensor import Tensor, _topological_order, gradients
from app.errors import LocalInrError, ShapeError

Outputs = Union[Tensor, Mapping[str, Tensor]]


class Graph:
    """A forward function bound to named parameter leaves.

    Evaluating the graph records the tape; :meth:`backward` sweeps the most
    recent tape.  The forward function receives the parameters and the bound
    inputs as keyword arguments and returns a tensor or a mapping of tensors.
    """

    def __init__(self, forward: Callable[..., Outputs], parameters: Mapping[str, Tensor]):
        self.forward = forward
        self.parameters: Dict[str, Tensor] = dict(parameters)
        self._outputs: Optional[Dict[str, Tensor]] = None

    def evaluate(self, inputs: Mapping[str, object]) -> Dict[str, Tensor]:
        try:
            inspect.signature(self.forward).bind(self.parameters, **inputs)
        except TypeError as exc:
            raise ShapeError("graph", f"inputs do not bind: {exc}") from None
        result = self.forward(self.parameters, **inputs)
        outputs = {"out": result} if isinstance(result, Tensor) else dict(result)
        self._outputs = outputs
        return outputs

    @property
    def nodes(self) -> list:
        if self._outputs is None:
            return []
        seen, order = set(), []
        for out in self._outputs.values():
            for node in _topological_order(out):
                if id(node) not in seen:
                    seen.add(id(node))
                    order.append(node)
        return order

    def backward(self, output_seed: Optional[np.ndarray] = None, output: str = "out") -> Dict[str, np.ndarray]:
        if self._outputs is None:
            raise LocalInrError("backward called before the graph was evaluated")
        if output not in self._outputs:
            raise ShapeError("graph", f"no output named '{output}'")
        return gradients(self._outputs[output], self.parameters, output_seed)


def eval_graph(graph: Graph, inputs: Mapping[str, object]) -> Dict[str, Tensor]:
    return graph.evaluate(inputs)


def backward(graph: Graph, output_seed: Optional[np.ndarray] = None, output: str = "out") -> Dict[str, np.ndarray]:
    return graph.backward(output_seed, output)
