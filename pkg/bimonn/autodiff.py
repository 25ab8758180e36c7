# Copyright 2023 Viktor Karlquist <vkarlqui@gmail.com>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Reverse-mode differentiation over dense double precision tensors.

Operations are plain functions taking and returning :class:`Tensor` objects. A tensor created
from a :class:`Tape` is a leaf; every operation with at least one recorded operand records its
output on the same tape together with a local gradient rule. Operands without a tape are
constants and receive no gradient.
"""

import logging
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel
from scipy.special import expit

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class AutodiffError(Exception):
    """Exception raised for errors in gradient computations."""

    def __init__(self, message: str):
        """Initialize AutodiffError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class ShapeMismatchError(AutodiffError):
    """Exception raised when operand shapes do not match what a node expects."""

    pass


class NonFiniteError(AutodiffError):
    """Exception raised when a non-finite value shows up where finite values are required."""

    pass


class Tensor:
    """Dense tensor of doubles, row-major, optionally recorded on a tape."""

    __slots__ = ("value", "name", "tape", "parents", "backward_rule")
    __array_ufunc__ = None

    def __init__(
        self,
        value: Union[np.ndarray, float, int],
        name: Optional[str] = None,
        tape: Optional["Tape"] = None,
        parents: Sequence["Tensor"] = (),
        backward_rule: Optional[BackwardRule] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.tape = tape
        self.parents = tuple(parents)
        self.backward_rule = backward_rule

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of the tensor."""
        return self.value.shape

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return self.value.ndim

    def item(self) -> float:
        """Return the single value of a scalar tensor."""
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(name={self.name}, shape={self.shape})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)


class Tape:
    """Record of the operations performed since the tape was created.

    Nodes are appended when created, so the list is topologically ordered.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self.output: Optional[Tensor] = None

    def leaf(self, value: Union[np.ndarray, float], name: str) -> Tensor:
        """Create a leaf tensor on this tape.

        Parameters
        ----------
        value : Union[np.ndarray, float]
            Initial value, copied
        name : str
            Name the gradient is reported under

        Returns
        -------
        Tensor
            The recorded leaf

        Raises
        ------
        NonFiniteError
            If the value contains NaN or infinity
        """
        array = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Leaf {name} holds non-finite values")
        tensor = Tensor(array, name=name, tape=self)
        self.nodes.append(tensor)
        self.leaves.append(tensor)
        return tensor

    def record(
        self,
        value: np.ndarray,
        parents: Sequence[Tensor],
        backward_rule: Optional[BackwardRule],
        name: str,
    ) -> Tensor:
        """Append an operation output to the tape."""
        tensor = Tensor(value, name=name, tape=self, parents=parents, backward_rule=backward_rule)
        self.nodes.append(tensor)
        return tensor


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors, pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _apply(
    name: str,
    value: np.ndarray,
    operands: Sequence[Tensor],
    backward_rule: BackwardRule,
) -> Tensor:
    tapes = {id(op.tape): op.tape for op in operands if op.tape is not None}
    if not tapes:
        return Tensor(value, name=name)
    if len(tapes) > 1:
        raise AutodiffError(f"Node {name} mixes tensors from different tapes")
    tape = next(iter(tapes.values()))
    return tape.record(value, operands, backward_rule, name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as err:
        raise ShapeMismatchError(f"Node {name}: cannot broadcast shapes {shapes}") from err


####################################################################################################
# Elementwise
####################################################################################################


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _apply(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise difference with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _apply(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _apply(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise quotient with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    return _apply(
        "div",
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    """Elementwise negation."""
    a = as_tensor(a)
    return _apply("neg", -a.value, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    return _apply(
        "power",
        a.value**exponent,
        (a,),
        lambda g: (g * exponent * a.value ** (exponent - 1),),
    )


def exp(a: ArrayLike) -> Tensor:
    """Elementwise exponential."""
    a = as_tensor(a)
    value = np.exp(a.value)
    return _apply("exp", value, (a,), lambda g: (g * value,))


def log(a: ArrayLike) -> Tensor:
    """Elementwise natural logarithm."""
    a = as_tensor(a)
    return _apply("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a: ArrayLike) -> Tensor:
    """Elementwise hyperbolic tangent."""
    a = as_tensor(a)
    value = np.tanh(a.value)
    return _apply("tanh", value, (a,), lambda g: (g * (1.0 - value * value),))


def softplus(a: ArrayLike) -> Tensor:
    """Elementwise log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    return _apply(
        "softplus", np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),)
    )


def xi(a: ArrayLike) -> Tensor:
    """Smooth threshold 0.5 * tanh(a) + 0.5."""
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _apply("xi", 0.5 * t + 0.5, (a,), lambda g: (g * 0.5 * (1.0 - t * t),))


def clip(a: ArrayLike, lower: float, upper: float) -> Tensor:
    """Clamp into [lower, upper]; the gradient is zero where clamping applies."""
    a = as_tensor(a)
    inside = (a.value >= lower) & (a.value <= upper)
    return _apply("clip", np.clip(a.value, lower, upper), (a,), lambda g: (g * inside,))


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from ``a`` where the constant mask is set, from ``b`` elsewhere."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("where", mask.shape, a.shape, b.shape)
    return _apply(
        "where",
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
    )


####################################################################################################
# Shape and reductions
####################################################################################################


def reduce_sum(a: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None) -> Tensor:
    """Sum over the given axes (all axes by default)."""
    a = as_tensor(a)
    value = a.value.sum(axis=axis)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", value, (a,), rule)


def mean(a: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None) -> Tensor:
    """Arithmetic mean over the given axes (all axes by default)."""
    a = as_tensor(a)
    count = a.value.size if axis is None else int(np.prod(np.take(a.shape, axis)))
    return reduce_sum(a, axis) / float(count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Reshape without copying the data order."""
    a = as_tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError as err:
        raise ShapeMismatchError(f"Node reshape: cannot reshape {a.shape} to {shape}") from err
    return _apply("reshape", value, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    operands = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in operands], axis=axis)
    except ValueError as err:
        raise ShapeMismatchError(f"Node concat: {err}") from err
    splits = np.cumsum([t.shape[axis] for t in operands])[:-1]
    return _apply("concat", value, operands, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Pick entries along the last axis, ``indices`` has the leading shape of ``a``."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.shape[:-1] != a.shape[:-1]:
        raise ShapeMismatchError(
            f"Node gather: index shape {indices.shape} does not fit operand {a.shape}"
        )

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros(a.shape)
        for column in range(indices.shape[-1]):
            scattered = np.zeros(a.shape)
            picked = slice(column, column + 1)
            np.put_along_axis(scattered, indices[..., picked], g[..., picked], -1)
            grad += scattered
        return (grad,)

    return _apply("gather", np.take_along_axis(a.value, indices, axis=-1), (a,), rule)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable log of the softmax along ``axis``."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probabilities = np.exp(value)
    return _apply(
        "log_softmax",
        value,
        (a,),
        lambda g: (g - probabilities * g.sum(axis=axis, keepdims=True),),
    )


####################################################################################################
# Contractions
####################################################################################################


def einsum(subscripts: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Two-operand Einstein summation.

    Every index of an operand must appear in the other operand or in the output, which is what
    the layer contractions need and keeps the gradient an einsum as well.
    """
    a, b = as_tensor(a), as_tensor(b)
    inputs, output = subscripts.replace(" ", "").split("->")
    spec_a, spec_b = inputs.split(",")
    for spec, other in ((spec_a, spec_b), (spec_b, spec_a)):
        if not set(spec) <= set(other) | set(output):
            raise AutodiffError(f"Node einsum: unsupported subscripts {subscripts}")
    try:
        value = np.einsum(subscripts, a.value, b.value, optimize=True)
    except ValueError as err:
        raise ShapeMismatchError(f"Node einsum {subscripts}: {err}") from err
    return _apply(
        "einsum",
        value,
        (a, b),
        lambda g: (
            np.einsum(f"{output},{spec_b}->{spec_a}", g, b.value, optimize=True),
            np.einsum(f"{output},{spec_a}->{spec_b}", g, a.value, optimize=True),
        ),
    )


def conv2d(x: ArrayLike, weights: ArrayLike) -> Tensor:
    """Per channel pair convolution with zero padding and same output size.

    Parameters
    ----------
    x : ArrayLike
        Input of shape (batch, N, height, width)
    weights : ArrayLike
        Kernels of shape (N, K, kh, kw), odd extents

    Returns
    -------
    Tensor
        Output of shape (batch, N, K, height, width) with
        ``out[b, n, k, i] = sum_j weights[n, k, j] * x[b, n, i - j]`` for offsets j centered on
        the kernel middle.

    Raises
    ------
    ShapeMismatchError
        If the shapes are inconsistent or a kernel extent is even
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 4 or weights.ndim != 4 or x.shape[1] != weights.shape[0]:
        raise ShapeMismatchError(
            f"Node conv2d: input {x.shape} does not match kernels {weights.shape}"
        )
    kh, kw = weights.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(f"Node conv2d: kernel extents must be odd, got {(kh, kw)}")
    batch, channels, height, width = x.shape
    rh, rw = kh // 2, kw // 2
    padded = np.pad(x.value, ((0, 0), (0, 0), (rh, rh), (rw, rw)))

    def window(row: int, col: int) -> tuple[slice, slice]:
        top, left = 2 * rh - row, 2 * rw - col
        return slice(top, top + height), slice(left, left + width)

    out = np.zeros((batch, channels, weights.shape[1], height, width))
    for row in range(kh):
        for col in range(kw):
            rows, cols = window(row, col)
            out += padded[:, :, None, rows, cols] * weights.value[None, :, :, row, col, None, None]

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_padded = np.zeros_like(padded)
        grad_weights = np.zeros(weights.shape)
        for row in range(kh):
            for col in range(kw):
                rows, cols = window(row, col)
                grad_padded[:, :, rows, cols] += np.einsum(
                    "bnkhw,nk->bnhw", g, weights.value[:, :, row, col], optimize=True
                )
                grad_weights[:, :, row, col] = np.einsum(
                    "bnkhw,bnhw->nk", g, padded[:, :, rows, cols], optimize=True
                )
        return grad_padded[:, :, rh : rh + height, rw : rw + width], grad_weights

    return _apply("conv2d", out, (x, weights), rule)


####################################################################################################
# Graph evaluation
####################################################################################################


class Graph:
    """A differentiable computation with declared input shapes."""

    def __init__(
        self,
        fn: Callable[..., ArrayLike],
        input_shapes: Sequence[Sequence[int]],
        input_names: Optional[Sequence[str]] = None,
        name: str = "graph",
    ):
        """Initialize Graph class.

        Parameters
        ----------
        fn : Callable[..., ArrayLike]
            Function of one tensor per declared input
        input_shapes : Sequence[Sequence[int]]
            Expected shape of every input
        input_names : Optional[Sequence[str]], optional
            Names the inputs and their gradients are reported under, by default input0, ...
        name : str, optional
            Graph name used in diagnostics, by default "graph"
        """
        self.fn = fn
        self.input_shapes = [tuple(shape) for shape in input_shapes]
        self.input_names = (
            list(input_names)
            if input_names is not None
            else [f"input{i}" for i in range(len(self.input_shapes))]
        )
        self.name = name
        if len(self.input_names) != len(self.input_shapes):
            raise AutodiffError(
                f"Graph {name}: {len(self.input_names)} names for {len(self.input_shapes)} inputs"
            )


def forward_eval(graph: Graph, inputs: Sequence[Union[np.ndarray, float]]) -> Tensor:
    """Evaluate a graph on a fresh tape.

    Parameters
    ----------
    graph : Graph
        Computation to evaluate
    inputs : Sequence[Union[np.ndarray, float]]
        One value per declared input

    Returns
    -------
    Tensor
        The output, recorded on the tape available as ``output.tape``

    Raises
    ------
    ShapeMismatchError
        If the inputs do not match the declared shapes
    """
    if len(inputs) != len(graph.input_shapes):
        raise ShapeMismatchError(
            f"Node {graph.name}: expected {len(graph.input_shapes)} inputs, got {len(inputs)}"
        )
    tape = Tape()
    leaves = []
    for value, shape, name in zip(inputs, graph.input_shapes, graph.input_names):
        array = np.asarray(value, dtype=np.float64)
        if array.shape != shape:
            raise ShapeMismatchError(
                f"Node {name}: expected shape {shape}, got {array.shape}"
            )
        leaves.append(tape.leaf(array, name))
    output = as_tensor(graph.fn(*leaves))
    if output.tape is not tape:
        output = tape.record(output.value.copy(), (), None, "output")
    tape.output = output
    return output


def backward_grad(
    tape: Tape, seed: Union[np.ndarray, float], output: Optional[Tensor] = None
) -> dict[str, np.ndarray]:
    """Propagate a seed gradient from an output back to every leaf of the tape.

    Parameters
    ----------
    tape : Tape
        Tape recorded by a forward evaluation
    seed : Union[np.ndarray, float]
        Gradient of the loss with respect to the output
    output : Optional[Tensor], optional
        Tensor to start from, by default the tape's recorded output

    Returns
    -------
    dict[str, np.ndarray]
        Gradient per leaf name, zeros for leaves the output does not depend on

    Raises
    ------
    ShapeMismatchError
        If the seed does not have the output's shape
    """
    output = output if output is not None else tape.output
    if output is None or output.tape is not tape:
        raise AutodiffError("Backward pass needs an output recorded on the tape")
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeMismatchError(
            f"Node {output.name}: seed shape {seed.shape} does not match output {output.shape}"
        )

    pending: dict[int, np.ndarray] = {id(output): seed}
    leaf_ids = {id(leaf) for leaf in tape.leaves}
    grads = {leaf.name: np.zeros(leaf.shape) for leaf in tape.leaves}
    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if id(node) in leaf_ids:
            grads[node.name] = grads[node.name] + grad
            continue
        if node.backward_rule is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_rule(grad)):
            if parent_grad is None or parent.tape is not tape:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return grads


class FiniteDiffReport(BaseModel):
    """Comparison of analytic gradients with central differences."""

    errors: dict[str, float] = {}
    """Largest relative error per parameter"""
    tolerance: float
    """Tolerance the errors were checked against"""

    @property
    def max_error(self) -> float:
        """Largest relative error over all parameters."""
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        """Whether every parameter is within tolerance."""
        return self.max_error <= self.tolerance


def finite_diff_check(
    graph: Graph,
    params: Union[Mapping[str, np.ndarray], Sequence[np.ndarray]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-3,
) -> FiniteDiffReport:
    """Compare backward_grad with central differences of the summed graph output.

    The relative error of a component is ``|analytic - numeric| / max(|analytic|, |numeric|,
    floor)``.

    Parameters
    ----------
    graph : Graph
        Computation to check
    params : Union[Mapping[str, np.ndarray], Sequence[np.ndarray]]
        Point to check at, by input name or in declaration order
    step : float, optional
        Difference step, by default 1e-5
    tolerance : float, optional
        Largest accepted relative error, by default 1e-4
    floor : float, optional
        Lower bound of the error denominator, by default 1e-3

    Returns
    -------
    FiniteDiffReport
        Per-parameter maximum relative errors

    Raises
    ------
    ValueError
        If the step is not positive
    NonFiniteError
        If the summed output is not finite at a probed point
    """
    if step <= 0:
        raise ValueError(f"Finite difference step must be positive, got {step}")
    if isinstance(params, Mapping):
        values = [np.array(params[name], dtype=np.float64) for name in graph.input_names]
    else:
        values = [np.array(value, dtype=np.float64) for value in params]

    def objective(point: list[np.ndarray]) -> float:
        total = float(forward_eval(graph, point).value.sum())
        if not np.isfinite(total):
            raise NonFiniteError(f"Graph {graph.name} produced a non-finite loss while probing")
        return total

    output = forward_eval(graph, values)
    analytic = backward_grad(output.tape, np.ones(output.shape), output)

    errors = {}
    for position, name in enumerate(graph.input_names):
        worst = 0.0
        for index in np.ndindex(values[position].shape):
            plus = [value.copy() for value in values]
            minus = [value.copy() for value in values]
            plus[position][index] += step
            minus[position][index] -= step
            numeric = (objective(plus) - objective(minus)) / (2.0 * step)
            exact = float(analytic[name][index])
            scale = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / scale)
        errors[name] = worst
        logging.debug(f"Finite difference check of {graph.name}.{name}: {worst:.3e}")
    return FiniteDiffReport(errors=errors, tolerance=tolerance)
