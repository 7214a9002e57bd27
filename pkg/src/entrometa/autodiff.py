"""Dense float64 reverse-mode differentiation on an immutable expression graph.

Every operation returns a fresh :class:`Tensor` node; existing nodes are never
mutated, so a parameter update written as a graph op (``theta - alpha * g``)
leaves the original parameter reachable and the whole unrolled inner loop
differentiable.  Gradients produced by :func:`grad` are themselves graph
nodes, which is what makes gradients-through-gradients (second-order
bi-level updates) work: differentiate a loss, feed the gradient back into
the graph, differentiate again.

Scope is deliberately small: 0-D/1-D/2-D arrays, the ops needed for MLP
classifiers (matmul, add/sub/mul with broadcasting, relu, reductions,
softmax cross-entropy) plus column slicing for grouped classifier heads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonScalarLossError",
    "NondeterministicBuilderError",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "mean_all",
    "sum_all",
    "sum_to_shape",
    "broadcast_to",
    "softmax",
    "softmax_xent",
    "slice_cols",
    "pad_cols",
    "grad",
    "backward",
    "grad_check_fd",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonScalarLossError(ValueError):
    """Backward was started from a non-scalar node."""


class NondeterministicBuilderError(RuntimeError):
    """A loss builder produced two different values for identical inputs."""


class Tensor:
    """One node of the expression graph: a float64 array plus provenance.

    Leaf nodes hold data (parameters or constants); interior nodes record
    the op that produced them, their parent nodes, and a vjp callback that
    maps an output adjoint to parent adjoints *as new graph nodes*.
    Treat instances as immutable after construction.
    """

    __slots__ = ("value", "requires_grad", "op", "parents", "_vjp", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        vjp: Callable[["Tensor"], tuple] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensor rank {arr.ndim} > 2 unsupported (shape {arr.shape})")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.name = name

    # -- convenience -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        """Constant copy of this node: same value, no gradient path."""
        return Tensor(self.value, requires_grad=False, op="detach")

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape})"

    # operator sugar; scalars are lifted to constant leaves
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- primitive ops ---------------------------------------------------------
#
# Each vjp builds its parent adjoints out of these same primitives, so the
# adjoints stay differentiable and a second backward pass over them yields
# correct second-order terms.


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def vjp(g: Tensor):
        return (sum_to_shape(g, a.shape), sum_to_shape(g, b.shape))

    return Tensor(a.value + b.value, op="add", parents=(a, b), vjp=vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)

    def vjp(g: Tensor):
        return (sum_to_shape(g, a.shape), sum_to_shape(neg(g), b.shape))

    return Tensor(a.value - b.value, op="sub", parents=(a, b), vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)

    def vjp(g: Tensor):
        return (sum_to_shape(mul(g, b), a.shape), sum_to_shape(mul(g, a), b.shape))

    return Tensor(a.value * b.value, op="mul", parents=(a, b), vjp=vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not a graph node)."""
    c = float(c)

    def vjp(g: Tensor):
        return (scale(g, c),)

    return Tensor(a.value * c, op="scale", parents=(a,), vjp=vjp)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g: Tensor):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return Tensor(a.value @ b.value, op="matmul", parents=(a, b), vjp=vjp)


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2, got shape {a.shape}")

    def vjp(g: Tensor):
        return (transpose(g),)

    return Tensor(a.value.T.copy(), op="transpose", parents=(a,), vjp=vjp)


def relu(a: Tensor) -> Tensor:
    # The active-set mask is a constant in the vjp: exact a.e., and the
    # second derivative through relu is correctly zero.
    mask = Tensor((a.value > 0).astype(np.float64))

    def vjp(g: Tensor):
        return (mul(g, mask),)

    return Tensor(np.maximum(a.value, 0.0), op="relu", parents=(a,), vjp=vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g: Tensor):
        return (broadcast_to(g, a.shape),)

    return Tensor(a.value.sum(), op="sum_all", parents=(a,), vjp=vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    if n == 0:
        raise ShapeError("mean_all: empty tensor")

    def vjp(g: Tensor):
        return (broadcast_to(scale(g, 1.0 / n), a.shape),)

    return Tensor(a.value.mean(), op="mean_all", parents=(a,), vjp=vjp)


def sum_to_shape(a: Tensor, shape: tuple) -> Tensor:
    """Reduce ``a`` back to ``shape`` by summing broadcast axes (vjp of broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    if np.broadcast_shapes(shape, a.shape) != a.shape:
        raise ShapeError(f"sum_to_shape: cannot reduce {a.shape} to {shape}")
    out = a.value
    # sum away leading axes, then keepdims-sum axes that are 1 in the target
    while out.ndim > len(shape):
        out = out.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and out.shape[ax] != 1:
            out = out.sum(axis=ax, keepdims=True)

    def vjp(g: Tensor):
        return (broadcast_to(g, a.shape),)

    return Tensor(out, op="sum_to_shape", parents=(a,), vjp=vjp)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")

    def vjp(g: Tensor):
        return (sum_to_shape(g, a.shape),)

    return Tensor(np.broadcast_to(a.value, shape).copy(), op="broadcast_to", parents=(a,), vjp=vjp)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax (rank-2 input), max-shifted for stability."""
    if a.value.ndim != 2:
        raise ShapeError(f"softmax: expected rank-2, got shape {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sm = e / e.sum(axis=1, keepdims=True)
    out = Tensor(sm, op="softmax", parents=(a,))

    def vjp(g: Tensor):
        gs = mul(g, out)
        return (sub(gs, mul(out, sum_to_shape(gs, (a.shape[0], 1)))),)

    out._vjp = vjp
    return out


def softmax_xent(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy against integer class targets.

    Log-sum-exp is max-shifted, so large noisy logits stay finite.  The
    adjoint is built from a fresh :func:`softmax` node on the same logits,
    keeping the loss twice-differentiable.
    """
    if logits.value.ndim != 2:
        raise ShapeError(f"softmax_xent: logits must be rank-2, got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_xent: targets shape {t.shape} does not match logits {logits.shape}"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError("softmax_xent: targets must be integers")
    n, c = logits.shape
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"softmax_xent: target out of range [0, {c})")
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), t]).mean()
    onehot = np.zeros((n, c))
    onehot[np.arange(n), t] = 1.0
    onehot_t = Tensor(onehot)

    def vjp(g: Tensor):
        return (mul(scale(g, 1.0 / n), sub(softmax(logits), onehot_t)), )

    return Tensor(loss, op="softmax_xent", parents=(logits,), vjp=vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``[start, stop)`` of a rank-2 tensor or rank-1 vector."""
    if a.value.ndim not in (1, 2):
        raise ShapeError(f"slice_cols: expected rank-1/2, got shape {a.shape}")
    width = a.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for width {width}")
    out = a.value[..., start:stop].copy()

    def vjp(g: Tensor):
        return (pad_cols(g, start, width),)

    return Tensor(out, op="slice_cols", parents=(a,), vjp=vjp)


def pad_cols(a: Tensor, start: int, total: int) -> Tensor:
    """Embed columns into a zero tensor of column width ``total`` (vjp of slice_cols)."""
    if a.value.ndim not in (1, 2):
        raise ShapeError(f"pad_cols: expected rank-1/2, got shape {a.shape}")
    width = a.shape[-1]
    if start < 0 or start + width > total:
        raise ShapeError(f"pad_cols: [{start}, {start + width}) out of range for width {total}")
    out_shape = a.shape[:-1] + (total,)
    out = np.zeros(out_shape)
    out[..., start:start + width] = a.value

    def vjp(g: Tensor):
        return (slice_cols(g, start, start + width),)

    return Tensor(out, op="pad_cols", parents=(a,), vjp=vjp)


# -- reverse accumulation --------------------------------------------------


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _needs_grad(order: Sequence[Tensor], wrt_ids: set) -> set:
    """Ids of nodes from which some wrt leaf is reachable via parents."""
    needed = set()
    for node in order:  # parents come first
        if id(node) in wrt_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    return needed


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """Adjoints of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Results are graph nodes, so they can be consumed by further ops (e.g.
    an unrolled parameter update) and differentiated again.  A ``wrt``
    entry with no path to the loss gets an exact-zero adjoint.
    """
    if loss.value.ndim != 0:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    needed = _needs_grad(order, {id(w) for w in wrt})
    adjoints: dict[int, Tensor] = {id(loss): Tensor(1.0)}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if id(parent) not in needed:
                continue
            prev = adjoints.get(id(parent))
            adjoints[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = adjoints.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


def backward(loss: Tensor) -> dict:
    """Gradient map over every ``requires_grad`` leaf reachable from ``loss``.

    Leaves without ``requires_grad`` are skipped; a requires_grad leaf with
    no path to the loss maps to an exact-zero tensor.
    """
    if loss.value.ndim != 0:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    leaves = [n for n in _toposort(loss) if not n.parents and n.requires_grad]
    return dict(zip(leaves, grad(loss, leaves)))


def grad_check_fd(
    loss_builder: Callable[[list], Tensor],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_builder`` receives a list of requires_grad leaf tensors (one per
    entry of ``params``) and must deterministically rebuild the scalar loss.
    Relative error is ``|analytic - fd| / (|fd| + 1e-12)`` maximised over
    every parameter component.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    values = [np.asarray(p, dtype=np.float64) for p in params]

    def build(vals):
        leaves = [Tensor(v, requires_grad=True) for v in vals]
        return loss_builder(leaves), leaves

    loss_a, leaves = build(values)
    loss_b, _ = build(values)
    if loss_a.value.tobytes() != loss_b.value.tobytes():
        raise NondeterministicBuilderError(
            "loss builder returned different values on identical inputs"
        )
    analytic = [g.value for g in grad(loss_a, leaves)]

    worst = 0.0
    for i, base in enumerate(values):
        flat = base.ravel()
        for j in range(flat.size):
            bumped = [v.copy() for v in values]
            bumped[i].ravel()[j] = flat[j] + epsilon
            up, _ = build(bumped)
            bumped[i].ravel()[j] = flat[j] - epsilon
            down, _ = build(bumped)
            fd = (up.item() - down.item()) / (2.0 * epsilon)
            err = abs(analytic[i].ravel()[j] - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
