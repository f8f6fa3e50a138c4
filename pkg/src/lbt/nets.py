"""Teacher supernet, fixed student classifiers, and genotype derivation.

The teacher is a small DAG cell whose edges mix candidate operations with
softmax-normalized architecture scalars.  Students are plain feed-forward
classifiers.  Builders come in two layers: node-level functions that wire a
network into an existing :class:`~lbt.autodiff.Graph` (so callers can feed
them freshly built weight nodes, e.g. one-step-updated weights), and cached
whole-graph wrappers for plain numeric forward passes.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node, softmax_array
from .weights import WeightSet

CANDIDATE_OPS = ("zero", "identity", "linear", "linear_tanh", "linear_relu")

# ops that carry a weight matrix and bias
_LINEAR_OPS = {"linear", "linear_tanh", "linear_relu"}


@dataclass(frozen=True)
class TeacherSpec:
    """Structure of the searchable teacher network."""

    feature_dim: int
    n_classes: int
    hidden_dim: int = 8
    n_nodes: int = 4
    n_cells: int = 1
    candidates: tuple[str, ...] = CANDIDATE_OPS

    def __post_init__(self):
        if self.n_nodes < 1 or self.n_cells < 1:
            raise ValueError("n_nodes and n_cells must be positive")
        unknown = set(self.candidates) - set(CANDIDATE_OPS)
        if unknown:
            raise ValueError(f"unknown candidate ops: {sorted(unknown)}")
        if not set(self.candidates) - {"zero"}:
            raise ValueError("need at least one non-zero candidate op")

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """(from_node, to_node) pairs; node 0 is the cell input."""
        return tuple((j, i) for i in range(1, self.n_nodes + 1) for j in range(i))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class StudentSpec:
    """A fixed feed-forward classifier; only its weights train."""

    feature_dim: int
    n_classes: int
    hidden: tuple[int, ...] = (8,)
    activation: str = "tanh"
    capacity: str = "small"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def student_spec(capacity: str, feature_dim: int, n_classes: int) -> StudentSpec:
    """Preset students: 'small' is a narrow single hidden layer, 'large' is
    a wider two-layer net (the strong/weak student contrast)."""
    presets = {"small": (8,), "large": (32, 32)}
    if capacity not in presets:
        raise ValueError(f"capacity must be one of {sorted(presets)}")
    return StudentSpec(feature_dim, n_classes, presets[capacity], "tanh", capacity)


@dataclass(frozen=True)
class ArchParams:
    """Per-edge scalars over candidate ops; softmax rows give mixing weights."""

    scalars: np.ndarray
    candidates: tuple[str, ...] = CANDIDATE_OPS

    def __post_init__(self):
        arr = np.asarray(self.scalars, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != len(self.candidates):
            raise ValueError(
                f"scalars must be (n_edges, {len(self.candidates)}), got {arr.shape}")
        object.__setattr__(self, "scalars", arr)

    @property
    def n_edges(self) -> int:
        return self.scalars.shape[0]

    def mixing_weights(self) -> np.ndarray:
        """Row-stochastic mixture weights (positive, rows sum to 1)."""
        return softmax_array(self.scalars)

    def with_scalars(self, scalars: np.ndarray) -> "ArchParams":
        return ArchParams(np.asarray(scalars, dtype=np.float64), self.candidates)


@dataclass(frozen=True)
class Genotype:
    """One selected operation per edge of the discrete architecture."""

    ops: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    n_nodes: int
    n_cells: int = 1

    def to_json_obj(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_cells": self.n_cells,
            "edges": [{"from": j, "to": i, "op": op}
                      for (j, i), op in zip(self.edges, self.ops)],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Genotype":
        edges = tuple((e["from"], e["to"]) for e in obj["edges"])
        ops = tuple(e["op"] for e in obj["edges"])
        return cls(ops=ops, edges=edges, n_nodes=int(obj["n_nodes"]),
                   n_cells=int(obj.get("n_cells", 1)))


def init_arch(spec: TeacherSpec, seed: int = 0) -> ArchParams:
    """All-zero scalars: every edge mixes its candidates uniformly."""
    del seed  # kept for signature symmetry with init_weights
    return ArchParams(np.zeros((spec.n_edges, spec.n_candidates)), spec.candidates)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_weights(spec, seed: int = 0) -> WeightSet:
    """Scaled-uniform weights for a TeacherSpec or StudentSpec, per seed."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, TeacherSpec):
        return _init_teacher(spec, rng)
    if isinstance(spec, StudentSpec):
        return _init_student(spec, rng)
    raise TypeError(f"expected TeacherSpec or StudentSpec, got {type(spec)!r}")


def _init_teacher(spec: TeacherSpec, rng: np.random.Generator) -> WeightSet:
    d, h = spec.feature_dim, spec.hidden_dim
    arrays: dict[str, np.ndarray] = {}
    arrays["t.stem.w"] = _uniform(rng, (d, h), d)
    arrays["t.stem.b"] = _uniform(rng, (h,), d)
    for c in range(spec.n_cells):
        for e in range(spec.n_edges):
            for op in spec.candidates:
                if op in _LINEAR_OPS:
                    arrays[f"t.c{c}.e{e}.{op}.w"] = _uniform(rng, (h, h), h)
                    arrays[f"t.c{c}.e{e}.{op}.b"] = _uniform(rng, (h,), h)
    arrays["t.head.w"] = _uniform(rng, (h, spec.n_classes), h)
    arrays["t.head.b"] = _uniform(rng, (spec.n_classes,), h)
    return WeightSet(arrays)


def _init_student(spec: StudentSpec, rng: np.random.Generator) -> WeightSet:
    arrays: dict[str, np.ndarray] = {}
    widths = (spec.feature_dim,) + spec.hidden + (spec.n_classes,)
    for i, (m, n) in enumerate(zip(widths[:-1], widths[1:])):
        arrays[f"s.l{i}.w"] = _uniform(rng, (m, n), m)
        arrays[f"s.l{i}.b"] = _uniform(rng, (n,), m)
    return WeightSet(arrays)


def init_discrete_weights(spec: TeacherSpec, genotype: Genotype, seed: int = 0) -> WeightSet:
    """Weights for the derived discrete network (selected ops only)."""
    rng = np.random.default_rng(seed)
    d, h = spec.feature_dim, spec.hidden_dim
    arrays: dict[str, np.ndarray] = {}
    arrays["t.stem.w"] = _uniform(rng, (d, h), d)
    arrays["t.stem.b"] = _uniform(rng, (h,), d)
    for c in range(genotype.n_cells):
        for e, op in enumerate(genotype.ops):
            if op in _LINEAR_OPS:
                arrays[f"t.c{c}.e{e}.{op}.w"] = _uniform(rng, (h, h), h)
                arrays[f"t.c{c}.e{e}.{op}.b"] = _uniform(rng, (h,), h)
    arrays["t.head.w"] = _uniform(rng, (h, spec.n_classes), h)
    arrays["t.head.b"] = _uniform(rng, (spec.n_classes,), h)
    return WeightSet(arrays)


# ----------------------------------------------------------------------
# node-level builders


def _apply_op(g: Graph, op: str, s: Node, w: Mapping[str, Node], prefix: str) -> Node | None:
    """Output of one candidate op on edge state ``s``; None for 'zero'."""
    if op == "zero":
        return None
    if op == "identity":
        return s
    z = g.add(g.matmul(s, w[f"{prefix}.{op}.w"]), w[f"{prefix}.{op}.b"])
    if op == "linear":
        return z
    if op == "linear_tanh":
        return g.tanh(z)
    if op == "linear_relu":
        return g.relu(z)
    raise ValueError(f"unknown op {op!r}")


def teacher_logits(g: Graph, spec: TeacherSpec, arch: Node,
                   w: Mapping[str, Node], x: Node) -> tuple[Node, dict]:
    """Wire the supernet forward pass; returns (logits, aux node handles).

    Each edge output is the softmax(arch row)-weighted sum of its candidate
    op outputs; each DAG node sums its incoming edges; the final node of the
    last cell feeds the linear classifier head.
    """
    aux: dict[str, Node] = {}
    state = g.add(g.matmul(x, w["t.stem.w"]), w["t.stem.b"])
    aux["stem"] = state
    for c in range(spec.n_cells):
        states = [state]
        for i in range(1, spec.n_nodes + 1):
            acc = None
            for e, (j, tgt) in enumerate(spec.edges):
                if tgt != i:
                    continue
                mix = g.softmax(g.row(arch, e))
                edge_out = None
                for k, op in enumerate(spec.candidates):
                    out = _apply_op(g, op, states[j], w, f"t.c{c}.e{e}")
                    if out is None:
                        continue  # zero op contributes nothing to the sum
                    term = g.mul(out, g.at(mix, k))
                    edge_out = term if edge_out is None else g.add(edge_out, term)
                if edge_out is None:
                    edge_out = g.smul(states[j], 0.0)
                aux[f"c{c}.edge{e}"] = edge_out
                acc = edge_out if acc is None else g.add(acc, edge_out)
            states.append(acc)
            aux[f"c{c}.node{i}"] = acc
        state = states[-1]
    logits = g.add(g.matmul(state, w["t.head.w"]), w["t.head.b"])
    return logits, aux


def student_logits(g: Graph, spec: StudentSpec, w: Mapping[str, Node], x: Node) -> Node:
    act = g.tanh if spec.activation == "tanh" else g.relu
    h = x
    n_layers = len(spec.hidden) + 1
    for i in range(n_layers):
        h = g.add(g.matmul(h, w[f"s.l{i}.w"]), w[f"s.l{i}.b"])
        if i < n_layers - 1:
            h = act(h)
    return h


def discrete_logits(g: Graph, spec: TeacherSpec, genotype: Genotype,
                    w: Mapping[str, Node], x: Node) -> Node:
    """Forward pass of the derived architecture (one op per edge, no mixing)."""
    state = g.add(g.matmul(x, w["t.stem.w"]), w["t.stem.b"])
    for c in range(genotype.n_cells):
        states = [state]
        for i in range(1, genotype.n_nodes + 1):
            acc = None
            for e, (j, tgt) in enumerate(genotype.edges):
                if tgt != i:
                    continue
                out = _apply_op(g, genotype.ops[e], states[j], w, f"t.c{c}.e{e}")
                if out is None:  # cannot happen: derivation never selects zero
                    out = g.smul(states[j], 0.0)
                acc = out if acc is None else g.add(acc, out)
            states.append(acc)
        state = states[-1]
    return g.add(g.matmul(state, w["t.head.w"]), w["t.head.b"])


def _param_nodes(g: Graph, weights: WeightSet) -> dict[str, Node]:
    return {name: g.param(name, arr.shape) for name, arr in weights.items()}


# ----------------------------------------------------------------------
# cached whole-graph wrappers for numeric forward passes


@functools.lru_cache(maxsize=64)
def _teacher_graph(spec: TeacherSpec):
    g = Graph()
    arch = g.param("arch", (spec.n_edges, spec.n_candidates))
    w = _param_nodes(g, init_weights(spec, 0))
    x = g.input("x", (None, spec.feature_dim))
    logits, aux = teacher_logits(g, spec, arch, w, x)
    return g, logits, g.softmax(logits), aux


@functools.lru_cache(maxsize=64)
def _student_graph(spec: StudentSpec):
    g = Graph()
    w = _param_nodes(g, init_weights(spec, 0))
    x = g.input("x", (None, spec.feature_dim))
    logits = student_logits(g, spec, w, x)
    return g, logits, g.softmax(logits)


def teacher_forward(spec: TeacherSpec, arch: ArchParams, weights: WeightSet,
                    x: np.ndarray) -> np.ndarray:
    """Supernet logits for a batch of inputs."""
    g, logits, _, _ = _teacher_graph(spec)
    bindings = {"arch": arch.scalars, "x": np.atleast_2d(x), **weights.as_dict()}
    return g.forward(bindings, logits)


def student_forward(spec: StudentSpec, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    g, logits, _ = _student_graph(spec)
    return g.forward({"x": np.atleast_2d(x), **weights.as_dict()}, logits)


# ----------------------------------------------------------------------
# genotype derivation and export


def derive_genotype(arch: ArchParams, n_nodes: int | None = None,
                    n_cells: int = 1) -> Genotype:
    """Per edge, pick the non-'zero' candidate with the largest scalar.

    Ties resolve to the lowest candidate index, so the result is a
    deterministic function of the scalars.
    """
    names = arch.candidates
    keep = [k for k, name in enumerate(names) if name != "zero"]
    ops = []
    for row in arch.scalars:
        best = keep[0]
        for k in keep[1:]:
            if row[k] > row[best]:
                best = k
        ops.append(names[best])
    if n_nodes is None:
        # invert n_edges = n(n+1)/2
        n_nodes = int(round((np.sqrt(8 * arch.n_edges + 1) - 1) / 2))
        if n_nodes * (n_nodes + 1) // 2 != arch.n_edges:
            raise ValueError(f"cannot infer n_nodes from {arch.n_edges} edges")
    edges = tuple((j, i) for i in range(1, n_nodes + 1) for j in range(i))
    return Genotype(ops=tuple(ops), edges=edges, n_nodes=n_nodes, n_cells=n_cells)


def export_genotype(arch: ArchParams, genotype: Genotype) -> str:
    """JSON document: selected op per edge plus the raw scalar matrix."""
    obj = genotype.to_json_obj()
    obj["candidates"] = list(arch.candidates)
    obj["scalars"] = [[float(v) for v in row] for row in arch.scalars]
    return json.dumps(obj, indent=2, sort_keys=True)


def load_genotype(text: str) -> Genotype:
    return Genotype.from_json_obj(json.loads(text))
