"""Reverse-mode automatic differentiation over small dense-tensor graphs.

A :class:`Graph` is an append-only list of primitive nodes in topological
order.  Build it once, then evaluate it many times against named parameter
and input bindings.  ``grad_nodes`` appends adjoint nodes to the same graph,
expressed in the same primitive vocabulary, so gradients are themselves
differentiable.  That property is what lets the search engine differentiate
through one-step weight updates.

All values are float64.  Evaluation never mutates bindings and raises on
any non-finite intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

EPS_LOG = 1e-12  # floor inside log() of cross-entropy; log(0) is never taken


class GraphError(ValueError):
    """Malformed graph, binding, or shape problem."""


class NonFiniteError(GraphError):
    """A node produced NaN or Inf during evaluation."""


@dataclass(frozen=True)
class Node:
    """Handle to one graph node.  Supports arithmetic sugar."""

    graph: "Graph"
    nid: int

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.graph is not self.graph:
                raise GraphError("nodes belong to different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.div(self, self._lift(other))

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __neg__(self):
        return self.graph.neg(self)


def as_tensor(value) -> np.ndarray:
    """Coerce to a finite float64 array (the tensor carrier type)."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def _reduce_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast result back to ``shape``."""
    if x.shape == shape:
        return x
    extra = x.ndim - len(shape)
    if extra < 0:
        raise GraphError(f"cannot reduce shape {x.shape} to {shape}")
    if extra:
        x = x.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (xs, rs) in enumerate(zip(x.shape, shape))
                 if rs == 1 and xs != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    if x.shape != shape:
        raise GraphError(f"cannot reduce shape {x.shape} to {shape}")
    return x


def _fw_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _fw_transpose(a):
    if a.ndim != 2:
        raise GraphError(f"transpose expects a matrix, got shape {a.shape}")
    return a.T


# opname -> forward(inputs, attr) -> ndarray
_FORWARD: dict[str, Callable] = {
    "add": lambda ins, attr: ins[0] + ins[1],
    "sub": lambda ins, attr: ins[0] - ins[1],
    "mul": lambda ins, attr: ins[0] * ins[1],
    "div": lambda ins, attr: ins[0] / ins[1],
    "neg": lambda ins, attr: -ins[0],
    "smul": lambda ins, attr: ins[0] * attr,
    "matmul": lambda ins, attr: _fw_matmul(ins[0], ins[1]),
    "transpose": lambda ins, attr: _fw_transpose(ins[0]),
    "tanh": lambda ins, attr: np.tanh(ins[0]),
    "relu": lambda ins, attr: np.maximum(ins[0], 0.0),
    "relu_mask": lambda ins, attr: (ins[0] > 0).astype(np.float64),
    "exp": lambda ins, attr: np.exp(ins[0]),
    "log": lambda ins, attr: np.log(ins[0]),
    "clamp_min": lambda ins, attr: np.maximum(ins[0], attr),
    "clamp_mask": lambda ins, attr: (ins[0] >= attr).astype(np.float64),
    "rowmax_const": lambda ins, attr: np.max(ins[0], axis=-1, keepdims=True),
    "rowsum": lambda ins, attr: np.sum(ins[0], axis=-1, keepdims=True),
    "sum_all": lambda ins, attr: np.asarray(np.sum(ins[0])),
    "rowcount": lambda ins, attr: np.asarray(float(ins[0].shape[0])),
    "broadcast_like": lambda ins, attr: np.broadcast_to(ins[0], ins[1].shape),
    "reduce_like": lambda ins, attr: _reduce_to(ins[0], ins[1].shape),
    "row": lambda ins, attr: ins[0][attr],
    "row_embed": lambda ins, attr: _embed_row(ins[0], ins[1], attr),
    "at": lambda ins, attr: np.asarray(ins[0][attr]),
    "at_embed": lambda ins, attr: _embed_at(ins[0], ins[1], attr),
}


def _embed_row(g, ref, i):
    out = np.zeros_like(ref)
    out[i] = g
    return out


def _embed_at(g, ref, i):
    out = np.zeros_like(ref)
    out[i] = g
    return out


class Graph:
    """Append-only computation graph with named parameters and inputs.

    Node ids are assigned in creation order, which is also a topological
    order: every node's inputs precede it.  Parameter registration order is
    the canonical order used by :meth:`grad_flat`.
    """

    def __init__(self):
        self._ops: list[tuple[str, tuple[int, ...], object]] = []
        self._const_values: dict[int, np.ndarray] = {}
        self._params: dict[str, int] = {}
        self._inputs: dict[str, int] = {}
        self._shapes: dict[int, tuple] = {}
        self._grad_cache: dict[tuple, dict[str, Node]] = {}
        self._closure_cache: dict[tuple[int, ...], tuple[int, ...]] = {}

    # ------------------------------------------------------------------
    # construction

    def _emit(self, op: str, inputs: tuple[int, ...], attr=None) -> Node:
        self._ops.append((op, inputs, attr))
        return Node(self, len(self._ops) - 1)

    def param(self, name: str, shape: tuple | None = None) -> Node:
        """Register a named trainable slot (bound at evaluation time)."""
        if name in self._params or name in self._inputs:
            raise GraphError(f"name {name!r} already registered")
        node = self._emit("param", (), name)
        self._params[name] = node.nid
        if shape is not None:
            self._shapes[node.nid] = tuple(shape)
        return node

    def input(self, name: str, shape: tuple | None = None) -> Node:
        """Register a named data slot (bound at evaluation time)."""
        if name in self._params or name in self._inputs:
            raise GraphError(f"name {name!r} already registered")
        node = self._emit("input", (), name)
        self._inputs[name] = node.nid
        if shape is not None:
            self._shapes[node.nid] = tuple(shape)
        return node

    def const(self, value) -> Node:
        node = self._emit("const", (), None)
        self._const_values[node.nid] = as_tensor(value)
        return node

    def param_names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def __len__(self) -> int:
        return len(self._ops)

    # primitive builders ------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        return self._emit("add", (a.nid, b.nid))

    def sub(self, a: Node, b: Node) -> Node:
        return self._emit("sub", (a.nid, b.nid))

    def mul(self, a: Node, b: Node) -> Node:
        return self._emit("mul", (a.nid, b.nid))

    def div(self, a: Node, b: Node) -> Node:
        return self._emit("div", (a.nid, b.nid))

    def neg(self, a: Node) -> Node:
        return self._emit("neg", (a.nid,))

    def smul(self, a: Node, c: float) -> Node:
        return self._emit("smul", (a.nid,), float(c))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._emit("matmul", (a.nid, b.nid))

    def transpose(self, a: Node) -> Node:
        return self._emit("transpose", (a.nid,))

    def tanh(self, a: Node) -> Node:
        return self._emit("tanh", (a.nid,))

    def relu(self, a: Node) -> Node:
        return self._emit("relu", (a.nid,))

    def exp(self, a: Node) -> Node:
        return self._emit("exp", (a.nid,))

    def log(self, a: Node) -> Node:
        return self._emit("log", (a.nid,))

    def clamp_min(self, a: Node, floor: float) -> Node:
        return self._emit("clamp_min", (a.nid,), float(floor))

    def rowsum(self, a: Node) -> Node:
        """Sum over the last axis, keepdims."""
        return self._emit("rowsum", (a.nid,))

    def sum_all(self, a: Node) -> Node:
        return self._emit("sum_all", (a.nid,))

    def rowcount(self, a: Node) -> Node:
        """Leading-axis length as a scalar; constant w.r.t. values."""
        return self._emit("rowcount", (a.nid,))

    def row(self, a: Node, i: int) -> Node:
        return self._emit("row", (a.nid,), int(i))

    def at(self, a: Node, i: int) -> Node:
        return self._emit("at", (a.nid,), int(i))

    # composite builders -------------------------------------------------

    def softmax(self, logits: Node) -> Node:
        """Row-wise stable softmax over the last axis.

        The max shift is held constant in the backward pass, which is exact
        because softmax is shift invariant.
        """
        m = self._emit("rowmax_const", (logits.nid,))
        e = self.exp(self.sub(logits, m))
        return self.div(e, self.rowsum(e))

    def soft_cross_entropy(self, probs: Node, targets: Node) -> Node:
        """Mean over rows of -sum_k targets_k * log(max(probs_k, EPS_LOG))."""
        lp = self.log(self.clamp_min(probs, EPS_LOG))
        per_row = self.rowsum(self.mul(targets, lp))
        return self.neg(self.div(self.sum_all(per_row), self.rowcount(targets)))

    # ------------------------------------------------------------------
    # evaluation

    def _closure(self, roots: tuple[int, ...]) -> tuple[int, ...]:
        cached = self._closure_cache.get(roots)
        if cached is not None:
            return cached
        seen: set[int] = set()
        stack = list(roots)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self._ops[nid][1])
        order = tuple(sorted(seen))
        self._closure_cache[roots] = order
        return order

    def eval(self, outputs: Sequence[Node], bindings: Mapping[str, object],
             check_finite: bool = True) -> list[np.ndarray]:
        """Evaluate the requested nodes against named bindings.

        Only ancestors of the requested outputs are computed.  Bindings are
        never mutated.  Unknown binding names are ignored, which lets one
        binding dict serve several graphs.
        """
        roots = tuple(n.nid for n in outputs)
        values: dict[int, np.ndarray] = {}
        for nid in self._closure(roots):
            op, inputs, attr = self._ops[nid]
            if op == "const":
                values[nid] = self._const_values[nid]
                continue
            if op in ("param", "input"):
                if attr not in bindings:
                    kind = "parameter" if op == "param" else "input"
                    raise GraphError(f"unbound {kind} {attr!r}")
                arr = np.asarray(bindings[attr], dtype=np.float64)
                self._check_declared_shape(nid, attr, arr)
                values[nid] = arr
            else:
                ins = tuple(values[i] for i in inputs)
                try:
                    values[nid] = _FORWARD[op](ins, attr)
                except GraphError:
                    raise
                except (ValueError, IndexError) as exc:
                    raise GraphError(f"node {nid} ({op}): {exc}") from exc
            if check_finite and not np.all(np.isfinite(values[nid])):
                raise NonFiniteError(f"node {nid} ({op}) produced a non-finite value")
        return [values[n.nid] for n in outputs]

    def _check_declared_shape(self, nid: int, name: str, arr: np.ndarray):
        declared = self._shapes.get(nid)
        if declared is None:
            return
        ok = arr.ndim == len(declared) and all(
            d is None or d == s for d, s in zip(declared, arr.shape))
        if not ok:
            raise GraphError(
                f"shape mismatch for {name!r}: declared {declared}, got {arr.shape}")

    def forward(self, bindings: Mapping[str, object], output: Node) -> np.ndarray:
        """Evaluate one node.  Deterministic for identical bindings."""
        return self.eval([output], bindings)[0]

    # ------------------------------------------------------------------
    # gradient transform

    def grad_nodes(self, loss: Node, wrt: Sequence[str]) -> dict[str, Node]:
        """Append adjoint nodes for d(loss)/d(param) and return their handles.

        The loss node must evaluate to a scalar.  Results are cached per
        (loss, wrt) pair, so repeated requests reuse the same nodes.
        """
        wrt = tuple(wrt)
        key = (loss.nid, wrt)
        cached = self._grad_cache.get(key)
        if cached is not None:
            return cached
        for name in wrt:
            if name not in self._params:
                raise GraphError(f"unknown parameter {name!r}")

        ancestors = set(self._closure((loss.nid,)))
        adjoint: dict[int, Node] = {loss.nid: self.const(1.0)}
        for nid in range(loss.nid, -1, -1):
            if nid not in ancestors or nid not in adjoint:
                continue
            op, inputs, attr = self._ops[nid]
            if op in ("param", "input", "const"):
                continue
            in_nodes = tuple(Node(self, i) for i in inputs)
            contribs = _vjp(self, op, in_nodes, Node(self, nid), adjoint[nid], attr)
            for src, contrib in zip(inputs, contribs):
                if contrib is None:
                    continue
                if src in adjoint:
                    adjoint[src] = self.add(adjoint[src], contrib)
                else:
                    adjoint[src] = contrib

        result: dict[str, Node] = {}
        for name in wrt:
            pid = self._params[name]
            # unused parameter: exact zeros of the bound shape
            result[name] = adjoint.get(pid) or self.smul(Node(self, pid), 0.0)
        self._grad_cache[key] = result
        return result

    def grad(self, loss: Node, wrt: Sequence[str],
             bindings: Mapping[str, object]) -> dict[str, np.ndarray]:
        """Numeric gradients of a scalar loss for the requested parameters."""
        nodes = self.grad_nodes(loss, tuple(wrt))
        ordered = list(nodes)
        out = self.eval([loss] + [nodes[n] for n in ordered], bindings)
        if out[0].size != 1:
            raise GraphError(f"loss node is not scalar (shape {out[0].shape})")
        return dict(zip(ordered, out[1:]))

    def value_and_grad(self, loss: Node, wrt: Sequence[str],
                       bindings: Mapping[str, object]):
        nodes = self.grad_nodes(loss, tuple(wrt))
        ordered = list(nodes)
        out = self.eval([loss] + [nodes[n] for n in ordered], bindings)
        if out[0].size != 1:
            raise GraphError(f"loss node is not scalar (shape {out[0].shape})")
        return float(out[0]), dict(zip(ordered, out[1:]))

    def grad_flat(self, loss: Node, wrt: Sequence[str],
                  bindings: Mapping[str, object]) -> np.ndarray:
        """Flat gradient vector in canonical (registration) parameter order."""
        grads = self.grad(loss, wrt, bindings)
        ordered = [n for n in self._params if n in grads]
        if not ordered:
            return np.zeros(0)
        return np.concatenate([grads[n].ravel() for n in ordered])


def _vjp(g: Graph, op: str, ins: tuple[Node, ...], out: Node, grad: Node, attr):
    """Adjoint contributions of one primitive, as new graph nodes.

    Returns one entry per input; ``None`` marks an exactly-zero adjoint
    (value-independent inputs such as shape references and masks).
    """
    if op == "add":
        return (_rlike(g, grad, ins[0]), _rlike(g, grad, ins[1]))
    if op == "sub":
        return (_rlike(g, grad, ins[0]), _rlike(g, g.neg(grad), ins[1]))
    if op == "mul":
        return (_rlike(g, g.mul(grad, ins[1]), ins[0]),
                _rlike(g, g.mul(grad, ins[0]), ins[1]))
    if op == "div":
        da = g.div(grad, ins[1])
        db = g.neg(g.div(g.mul(grad, out), ins[1]))
        return (_rlike(g, da, ins[0]), _rlike(g, db, ins[1]))
    if op == "neg":
        return (g.neg(grad),)
    if op == "smul":
        return (g.smul(grad, attr),)
    if op == "matmul":
        return (g.matmul(grad, g.transpose(ins[1])),
                g.matmul(g.transpose(ins[0]), grad))
    if op == "transpose":
        return (g.transpose(grad),)
    if op == "tanh":
        return (g.sub(grad, g.mul(grad, g.mul(out, out))),)
    if op == "relu":
        return (g.mul(grad, g._emit("relu_mask", (ins[0].nid,))),)
    if op == "exp":
        return (g.mul(grad, out),)
    if op == "log":
        return (g.div(grad, ins[0]),)
    if op == "clamp_min":
        mask = g._emit("clamp_mask", (ins[0].nid,), attr)
        return (g.mul(grad, mask),)
    if op == "rowsum":
        return (g._emit("broadcast_like", (grad.nid, ins[0].nid)),)
    if op == "sum_all":
        return (g._emit("broadcast_like", (grad.nid, ins[0].nid)),)
    if op == "broadcast_like":
        return (g._emit("reduce_like", (grad.nid, ins[0].nid)), None)
    if op == "reduce_like":
        return (g._emit("broadcast_like", (grad.nid, ins[0].nid)), None)
    if op == "row":
        return (g._emit("row_embed", (grad.nid, ins[0].nid), attr),)
    if op == "row_embed":
        return (g.row(grad, attr), None)
    if op == "at":
        return (g._emit("at_embed", (grad.nid, ins[0].nid), attr),)
    if op == "at_embed":
        return (g.at(grad, attr), None)
    if op in ("relu_mask", "clamp_mask", "rowmax_const", "rowcount"):
        return tuple(None for _ in ins)
    raise GraphError(f"no vjp rule for op {op!r}")


def _rlike(g: Graph, grad: Node, ref: Node) -> Node:
    """Reduce a (possibly broadcast) adjoint back to the shape of ``ref``."""
    return g._emit("reduce_like", (grad.nid, ref.nid))


# ----------------------------------------------------------------------
# plain-array helpers (used by oracles, pseudo-labeling checks, and tests)


def softmax_array(x) -> np.ndarray:
    """Row-wise softmax over the last axis of a plain array."""
    x = as_tensor(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def soft_cross_entropy(pred, target) -> float:
    """Cross entropy -sum_k target_k log(max(pred_k, EPS_LOG)), mean over rows.

    Accepts single K-vectors or (B, K) batches.  Targets must be
    distributions: nonnegative rows summing to 1 within 1e-6.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.ndim == 1:
        pred = pred[None, :]
    if target.ndim == 1:
        target = target[None, :]
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if np.any(target < 0):
        bad = int(np.argwhere(np.min(target, axis=-1) < 0)[0][0])
        raise ValueError(f"target row {bad} has a negative entry")
    sums = np.sum(target, axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"target row {bad} sums to {sums[bad]!r}, not 1")
    lp = np.log(np.maximum(pred, EPS_LOG))
    return float(np.mean(-np.sum(target * lp, axis=-1)))
