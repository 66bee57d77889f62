"""Dense tensors with define-by-run reverse-mode differentiation."""

import contextlib
import contextvars
from typing import Iterator, List, Optional, Tuple

import numpy as np

from vrfam.errors import GraphError

_grad_enabled = contextvars.ContextVar("vrfam_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the ``with`` block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    """Return whether operations currently record the computation graph."""
    return _grad_enabled.get()


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which maps
    the gradient of the output to one gradient (or ``None``) per input tensor.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs: Tuple["Tensor", ...] = inputs
        self.released = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    def release(self) -> None:
        """Drop the arrays saved for backward; the node cannot be traversed again."""
        self.released = True
        for name in list(vars(self)):
            if name.startswith("saved_"):
                setattr(self, name, None)

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        """Run the forward pass and record the node when gradients are needed."""
        function = cls(*inputs)
        out = function.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(
            out,
            requires_grad=requires_grad,
            dtype=out.dtype,
            creator=function if requires_grad else None,
        )


class Tensor:
    """Dense real-valued array that takes part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values of the tensor, stored row-major.
    requires_grad : bool, optional
        Whether gradients are accumulated for this tensor, by default False.
    dtype : numpy dtype, optional
        Storage precision, by default float32. Gradient checks pass float64.
    creator : Function, optional
        The operation that produced this tensor, None for leaves.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=np.float32,
        creator: Optional[Function] = None,
    ):
        self.data: np.ndarray = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = creator

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of this tensor into every leaf that requires them.

        Parameters
        ----------
        grad : np.ndarray, optional
            Gradient of the final objective with respect to this tensor. May be
            omitted for single-element tensors, where it defaults to one.

        Raises
        ------
        GraphError
            If the tensor does not require gradients, or the graph behind it
            was already traversed by an earlier backward call.
        """
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(
                    f"backward() needs an explicit gradient for shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        graph = ComputationGraph.from_output(self)
        if any(node.released for node in graph.nodes):
            raise GraphError("backward() called twice on the same graph; run a new forward pass")

        grads = {id(self): grad}
        for tensor in graph.tensors_reversed():
            upstream = grads.pop(id(tensor), None)
            if upstream is None:
                continue
            if tensor.creator is None:
                if tensor.requires_grad:
                    tensor.grad = upstream.copy() if tensor.grad is None else tensor.grad + upstream
                continue
            for source, source_grad in zip(tensor.creator.inputs, tensor.creator.backward(upstream)):
                if source_grad is None or not source.requires_grad:
                    continue
                if id(source) in grads:
                    grads[id(source)] = grads[id(source)] + source_grad
                else:
                    grads[id(source)] = source_grad
        for node in graph.nodes:
            node.release()


class ComputationGraph:
    """Operations recorded during one forward pass, in topological order.

    Attributes:
        nodes (List[Function]): Recorded operations, producers before consumers.
        tensors (List[Tensor]): Every tensor reachable from the output, producers
            before consumers. The output is last.
    """

    def __init__(self, tensors: List[Tensor]):
        self.tensors = tensors
        self.nodes: List[Function] = [t.creator for t in tensors if t.creator is not None]

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationGraph":
        """Collect the graph that produced ``output`` with an iterative DFS."""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.creator is not None:
                for source in tensor.creator.inputs:
                    if id(source) not in visited:
                        stack.append((source, False))
        return cls(order)

    def tensors_reversed(self) -> Iterator[Tensor]:
        """Yield tensors so that each one comes after all of its consumers."""
        return reversed(self.tensors)

    def op_names(self) -> List[str]:
        """Return the class names of the recorded operations."""
        return [type(node).__name__ for node in self.nodes]


def as_tensor(value, dtype=np.float32) -> Tensor:
    """Wrap ``value`` into a constant tensor unless it already is one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)
