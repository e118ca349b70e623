"""Scalar reverse-mode automatic differentiation with a forward tangent channel.

A :class:`Tape` records a DAG of scalar primitives. ``backward`` accumulates
exact reverse-mode gradients with respect to every leaf. When the tape is
created with ``with_tangent=True``, one leaf may be designated as the seed
variable and every recorded node carries a *tangent*: the derivative of its
value with respect to the seed. Tangents are themselves built out of recorded
primitives, so an expression that uses a tangent (for instance a loss that
penalizes a time derivative) can still be differentiated in reverse mode with
respect to the leaves. That mixed second-order path is the whole point of the
design; higher forward orders are not supported.
"""

import math
from dataclasses import dataclass

BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("neg", "exp", "log", "tanh", "softplus", "square")
OPS = BINARY_OPS + UNARY_OPS + ("logsumexp",)


@dataclass(frozen=True, eq=False)
class NodeId:
    """Handle to one recorded node; only valid for the tape that issued it."""

    tape: "Tape"
    index: int

    def __eq__(self, other):
        return (
            isinstance(other, NodeId)
            and self.tape is other.tape
            and self.index == other.index
        )

    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __repr__(self):
        return f"NodeId({self.index}: {self.tape.op(self)}={self.value:g})"

    @property
    def value(self) -> float:
        return self.tape.value(self)

    @property
    def tangent(self) -> "NodeId | None":
        return self.tape.tangent(self)

    # Operator sugar; floats are lifted to constant nodes.
    def _lift(self, other) -> "NodeId":
        if isinstance(other, NodeId):
            return other
        return self.tape.const(float(other))

    def __add__(self, other):
        return self.tape.record("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self._lift(other) + self

    def __sub__(self, other):
        return self.tape.record("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        return self.tape.record("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self._lift(other) * self

    def __truediv__(self, other):
        return self.tape.record("div", (self, self._lift(other)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return self.tape.record("neg", (self,))

    def exp(self):
        return self.tape.record("exp", (self,))

    def log(self):
        return self.tape.record("log", (self,))

    def tanh(self):
        return self.tape.record("tanh", (self,))

    def softplus(self):
        return self.tape.record("softplus", (self,))

    def square(self):
        return self.tape.record("square", (self,))


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    # max(x, 0) + log1p(exp(-|x|)) never overflows.
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


class Tape:
    """Append-only record of scalar primitives, single writer."""

    def __init__(self, with_tangent: bool = False):
        self.with_tangent = with_tangent
        self._op: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._partials: list[tuple[float, ...]] = []
        self._value: list[float] = []
        self._tan: list[int | None] = []
        self._seed_index: int | None = None

    def __len__(self) -> int:
        return len(self._op)

    # -- node construction -------------------------------------------------

    def _push(self, op, inputs, partials, value, tan=None) -> int:
        self._op.append(op)
        self._inputs.append(inputs)
        self._partials.append(partials)
        self._value.append(value)
        self._tan.append(tan)
        return len(self._op) - 1

    def leaf(self, value: float, tangent: float | None = None) -> NodeId:
        """Record an input variable; `tangent` designates the seed."""
        if tangent is not None and not self.with_tangent:
            raise ValueError("tangent seed on a tape without tangent mode")
        idx = self._push("leaf", (), (), float(value))
        if self.with_tangent:
            seed = 0.0 if tangent is None else float(tangent)
            if seed != 0.0:
                if self._seed_index is not None:
                    raise ValueError("only one tangent seed per tape")
                self._seed_index = idx
            self._tan[idx] = self._push("const", (), (), seed)
        return NodeId(self, idx)

    def const(self, value: float) -> NodeId:
        """Record a constant; excluded from gradient maps, tangent 0."""
        idx = self._push("const", (), (), float(value))
        if self.with_tangent:
            self._tan[idx] = self._push("const", (), (), 0.0)
        return NodeId(self, idx)

    def record(self, op: str, inputs) -> NodeId:
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        idxs = []
        for node in inputs:
            if not isinstance(node, NodeId) or node.tape is not self:
                raise ValueError("input node belongs to a different tape")
            idxs.append(node.index)
        idxs = tuple(idxs)
        if op in BINARY_OPS and len(idxs) != 2:
            raise ValueError(f"{op} takes 2 inputs")
        if op in UNARY_OPS and len(idxs) != 1:
            raise ValueError(f"{op} takes 1 input")
        if op == "logsumexp" and len(idxs) < 1:
            raise ValueError("logsumexp takes at least 1 input")
        idx = self._eval(op, idxs)
        if self.with_tangent:
            in_tans = [self._tan[i] for i in idxs]
            if all(t is not None for t in in_tans):
                self._tan[idx] = self._build_tangent(op, idxs, idx, in_tans)
        return NodeId(self, idx)

    def logsumexp(self, inputs) -> NodeId:
        return self.record("logsumexp", tuple(inputs))

    def _eval(self, op, idxs) -> int:
        v = self._value
        if op == "add":
            x, y = v[idxs[0]], v[idxs[1]]
            return self._push(op, idxs, (1.0, 1.0), x + y)
        if op == "sub":
            x, y = v[idxs[0]], v[idxs[1]]
            return self._push(op, idxs, (1.0, -1.0), x - y)
        if op == "mul":
            x, y = v[idxs[0]], v[idxs[1]]
            return self._push(op, idxs, (y, x), x * y)
        if op == "div":
            x, y = v[idxs[0]], v[idxs[1]]
            val = x / y  # raises ZeroDivisionError
            return self._push(op, idxs, (1.0 / y, -val / y), val)
        if op == "neg":
            return self._push(op, idxs, (-1.0,), -v[idxs[0]])
        if op == "exp":
            val = math.exp(v[idxs[0]])
            return self._push(op, idxs, (val,), val)
        if op == "log":
            x = v[idxs[0]]
            if x <= 0.0:
                raise ValueError(f"log of non-positive value {x}")
            return self._push(op, idxs, (1.0 / x,), math.log(x))
        if op == "tanh":
            val = math.tanh(v[idxs[0]])
            return self._push(op, idxs, (1.0 - val * val,), val)
        if op == "softplus":
            x = v[idxs[0]]
            return self._push(op, idxs, (_sigmoid(x),), _softplus(x))
        if op == "square":
            x = v[idxs[0]]
            return self._push(op, idxs, (2.0 * x,), x * x)
        # logsumexp with running-max subtraction
        xs = [v[i] for i in idxs]
        m = max(xs)
        val = m + math.log(sum(math.exp(x - m) for x in xs))
        partials = tuple(math.exp(x - val) for x in xs)
        return self._push(op, idxs, partials, val)

    # -- tangent expressions -----------------------------------------------

    def _raw(self, op, idxs) -> int:
        return self._eval(op, tuple(idxs))

    def _build_tangent(self, op, idxs, out, tans) -> int:
        """Record the forward chain rule of `op` as tape nodes."""
        if op == "add":
            return self._raw("add", (tans[0], tans[1]))
        if op == "sub":
            return self._raw("sub", (tans[0], tans[1]))
        if op == "neg":
            return self._raw("neg", (tans[0],))
        if op == "mul":
            left = self._raw("mul", (tans[0], idxs[1]))
            right = self._raw("mul", (idxs[0], tans[1]))
            return self._raw("add", (left, right))
        if op == "div":
            # (t_x - value * t_y) / y, reusing the quotient node
            num = self._raw("sub", (tans[0], self._raw("mul", (out, tans[1]))))
            return self._raw("div", (num, idxs[1]))
        if op == "exp":
            return self._raw("mul", (out, tans[0]))
        if op == "log":
            return self._raw("div", (tans[0], idxs[0]))
        if op == "tanh":
            one = self._push("const", (), (), 1.0)
            sech2 = self._raw("sub", (one, self._raw("square", (out,))))
            return self._raw("mul", (tans[0], sech2))
        if op == "softplus":
            # sigmoid(x) = exp(x - softplus(x))
            sig = self._raw("exp", (self._raw("sub", (idxs[0], out)),))
            return self._raw("mul", (tans[0], sig))
        if op == "square":
            two_x = self._raw("add", (idxs[0], idxs[0]))
            return self._raw("mul", (tans[0], two_x))
        # logsumexp: sum_i softmax_i * t_i
        acc = None
        for i, t in zip(idxs, tans):
            w = self._raw("exp", (self._raw("sub", (i, out)),))
            term = self._raw("mul", (w, t))
            acc = term if acc is None else self._raw("add", (acc, term))
        return acc

    # -- queries -------------------------------------------------------------

    def _check(self, node: NodeId) -> int:
        if not isinstance(node, NodeId) or node.tape is not self:
            raise ValueError("node belongs to a different tape")
        return node.index

    def op(self, node: NodeId) -> str:
        return self._op[self._check(node)]

    def value(self, node: NodeId) -> float:
        return self._value[self._check(node)]

    def tangent(self, node: NodeId) -> NodeId | None:
        """Tangent of `node` as a tape expression, or None if unavailable."""
        t = self._tan[self._check(node)]
        return None if t is None else NodeId(self, t)

    def leaves(self) -> list[NodeId]:
        return [NodeId(self, i) for i, op in enumerate(self._op) if op == "leaf"]

    # -- reverse accumulation ------------------------------------------------

    def backward(self, output: NodeId) -> dict[NodeId, float]:
        """Exact dU/dleaf for every leaf by reverse accumulation."""
        out = self._check(output)
        adj = [0.0] * (out + 1)
        adj[out] = 1.0
        inputs, partials = self._inputs, self._partials
        for i in range(out, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            for j, p in zip(inputs[i], partials[i]):
                adj[j] += a * p
        return {
            NodeId(self, i): (adj[i] if i <= out else 0.0)
            for i, op in enumerate(self._op)
            if op == "leaf"
        }
