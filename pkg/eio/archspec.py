#!/usr/bin/env python3
"""
Architecture files and the random gated network construction plan.

An architecture file is line oriented. Each line declares either one node,
``<id> <kind> key=value ...``, or one connection, ``edge <src> <dst>``.
Blank lines and ``#`` comments are ignored. Declaration order breaks ties in
the topological order, so a file lists its layers in the order they should
be counted for top-k scoping.
"""

import re
import heapq
import hashlib
from pathlib import Path
from typing import Optional
from dataclasses import dataclass, field

from eio import ARCH_DIR


KINDS = (
        "conv", "batchnorm", "linear", "activation", "pool", "add",
        "input", "output",
)
PARAM_KINDS = ("conv", "linear")
REQUIRED_ATTRS = {
        "conv": ("in", "out", "kernel"),
        "batchnorm": ("features",),
        "linear": ("in", "out"),
        "input": ("shape",),
}
INT_ATTRS = (
        "in", "out", "kernel", "stride", "padding", "bias", "features",
        "global", "dims",
)
SCOPE_MODES = ("all", "top_k", "explicit_list")


class ParseError(RuntimeError):
    def __init__(self, message, line=None, field=None):
        locus = []
        if line is not None:
            locus.append(f"line {line}")
        if field is not None:
            locus.append(f"field '{field}'")
        if locus:
            message = f"{message} ({', '.join(locus)})"
        super().__init__(message)
        self.line = line
        self.field = field


@dataclass
class LayerNode:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    line: int = 0

    def get(self, key, default=None):
        return self.attrs.get(key, default)

    @property
    def shape(self):
        """Input shape ``(C, H, W)`` for ``input`` nodes."""
        return tuple(int(v) for v in str(self.attrs["shape"]).split("x"))

    def to_line(self):
        attrs = " ".join(f"{k}={self.attrs[k]}" for k in sorted(self.attrs))
        return f"{self.id} {self.kind} {attrs}".rstrip()


class ArchGraph:
    """
    Directed layer graph of a base CNN.

    Parameters
    ----------
    nodes : list of LayerNode
        Nodes in declaration order.
    edges : list of (str, str)
        Directed connections ``(src, dst)``.
    name : str
    """
    def __init__(self, nodes, edges, name="arch"):
        self.name = name
        self.nodes = list(nodes)
        self.edges = list(edges)
        self._by_id = {n.id: n for n in self.nodes}
        self._decl = {n.id: i for i, n in enumerate(self.nodes)}
        self._preds = {n.id: [] for n in self.nodes}
        self._succs = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            if src not in self._by_id or dst not in self._by_id:
                raise ParseError(f"Dangling edge: {src} -> {dst}")
            self._succs[src].append(dst)
            self._preds[dst].append(src)
        self._check_degrees()
        self.order = self._toposort()
        self.fused = self._find_fused()
        convs = [i for i in self.order if self._by_id[i].kind in PARAM_KINDS]
        self.classifier_id = None
        if convs and self._by_id[convs[-1]].kind == "linear":
            self.classifier_id = convs.pop()
        self.param_layer_ids = tuple(convs)

    def __getitem__(self, node_id):
        return self._by_id[node_id]

    def __contains__(self, node_id):
        return node_id in self._by_id

    def predecessors(self, node_id):
        return list(self._preds[node_id])

    def successors(self, node_id):
        return list(self._succs[node_id])

    @property
    def input_id(self):
        return next(n.id for n in self.nodes if n.kind == "input")

    @property
    def output_id(self):
        return next(n.id for n in self.nodes if n.kind == "output")

    @property
    def input_shape(self):
        return self[self.input_id].shape

    @property
    def operator_count(self):
        """Number of operators ``m``, i.e. nodes other than input/output."""
        return sum(n.kind not in ("input", "output") for n in self.nodes)

    @property
    def has_skip_connections(self):
        return any(n.kind == "add" for n in self.nodes)

    @property
    def layer_ids(self):
        """Every node that owns parameters when instantiated."""
        fused_bns = set(self.fused.values())
        return tuple(
                i for i in self.order
                if self[i].kind in PARAM_KINDS
                or (self[i].kind == "batchnorm" and i not in fused_bns)
        )

    def fused_bn(self, node_id):
        return self.fused.get(node_id)

    def unit_output(self, node_id):
        """Node whose value is the output of a (possibly fused) layer."""
        return self.fused.get(node_id, node_id)

    def tap_node(self, node_id):
        """
        Feature tap of a parameterized layer: the activation directly
        consuming the layer output if there is exactly one, otherwise the
        layer output itself.
        """
        out = self.unit_output(node_id)
        succs = self._succs[out]
        if len(succs) == 1 and self[succs[0]].kind == "activation":
            return succs[0]
        return out

    def _check_degrees(self):
        inputs = [n for n in self.nodes if n.kind == "input"]
        outputs = [n for n in self.nodes if n.kind == "output"]
        if len(inputs) != 1:
            raise ParseError(f"Expected one input node, found {len(inputs)}")
        if len(outputs) != 1:
            raise ParseError(f"Expected one output node, found {len(outputs)}")
        for node in self.nodes:
            n_in = len(self._preds[node.id])
            n_out = len(self._succs[node.id])
            if node.kind == "input" and n_in != 0:
                raise ParseError(f"Input node has inputs: {node.id}", node.line)
            if node.kind == "output" and n_out != 0:
                raise ParseError(f"Output node has outputs: {node.id}", node.line)
            if node.kind == "add":
                if n_in < 2:
                    raise ParseError(f"Add needs two inputs: {node.id}", node.line)
                skip = node.get("skip")
                if skip is not None and skip not in self._preds[node.id]:
                    raise ParseError(
                            f"Skip input is not connected: {node.id}",
                            node.line, "skip")
            elif node.kind != "input" and n_in != 1:
                raise ParseError(
                        f"Node needs exactly one input: {node.id}", node.line)
            if node.kind != "output" and n_out == 0:
                raise ParseError(f"Node output is unused: {node.id}", node.line)

    def _toposort(self):
        indeg = {i: len(p) for i, p in self._preds.items()}
        ready = [(self._decl[i], i) for i, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            _, node_id = heapq.heappop(ready)
            order.append(node_id)
            for succ in self._succs[node_id]:
                indeg[succ] -= 1
                if indeg[succ] == 0:
                    heapq.heappush(ready, (self._decl[succ], succ))
        if len(order) != len(self.nodes):
            stuck = sorted(set(self._by_id) - set(order))
            raise ParseError(f"Cycle detected through: {', '.join(stuck)}")
        return order

    def _find_fused(self):
        fused = {}
        for node in self.nodes:
            if node.kind != "conv":
                continue
            succs = self._succs[node.id]
            if len(succs) != 1:
                continue
            nxt = self[succs[0]]
            if nxt.kind == "batchnorm" and len(self._preds[nxt.id]) == 1:
                fused[node.id] = nxt.id
        return fused

    def to_text(self):
        lines = [n.to_line() for n in self.nodes]
        lines += [f"edge {src} {dst}" for src, dst in self.edges]
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()


class ArchParser:
    p_edge = re.compile(R"^edge\s+(\S+)\s+(\S+)$")
    p_node = re.compile(R"^(\S+)\s+(\S+)((?:\s+\S+)*)$")
    p_id = re.compile(R"^[A-Za-z_]\w*$")
    p_attr = re.compile(R"^([a-z_]+)=(\S+)$")
    p_shape = re.compile(R"^\d+(x\d+)*$")

    def __init__(self, text, name="arch"):
        self.text = text
        self.name = name
        self.nodes = []
        self.edges = []
        self._edge_lines = []

    def parse(self):
        for lineno, raw in enumerate(self.text.split("\n"), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m_edge = self.p_edge.match(line)
            if m_edge:
                self.edges.append(m_edge.groups())
                self._edge_lines.append(lineno)
                continue
            if line.startswith("edge"):
                raise ParseError("Malformed edge", lineno, "edge")
            self.nodes.append(self.parse_node(line, lineno))
        if not self.nodes:
            raise ParseError("Architecture declares no nodes")
        known = {n.id for n in self.nodes}
        seen = set()
        for (src, dst), lineno in zip(self.edges, self._edge_lines):
            for end in (src, dst):
                if end not in known:
                    raise ParseError(f"Dangling edge to '{end}'", lineno, end)
            if (src, dst) in seen:
                raise ParseError(f"Duplicate edge {src} -> {dst}", lineno)
            seen.add((src, dst))
        return ArchGraph(self.nodes, self.edges, name=self.name)

    def parse_node(self, line, lineno):
        m_node = self.p_node.match(line)
        if not m_node:
            raise ParseError("Could not parse node", lineno)
        node_id, kind, rest = m_node.groups()
        if not self.p_id.match(node_id):
            raise ParseError(f"Invalid node id '{node_id}'", lineno, "id")
        if node_id == "edge":
            raise ParseError("Reserved node id 'edge'", lineno, "id")
        if any(n.id == node_id for n in self.nodes):
            raise ParseError(f"Duplicate node id '{node_id}'", lineno, "id")
        if kind not in KINDS:
            raise ParseError(f"Unknown layer kind '{kind}'", lineno, "kind")
        attrs = {}
        for token in rest.split():
            m_attr = self.p_attr.match(token)
            if not m_attr:
                raise ParseError(f"Malformed attribute '{token}'", lineno, token)
            key, value = m_attr.groups()
            if key in INT_ATTRS:
                try:
                    value = int(value)
                except ValueError:
                    raise ParseError(f"Expected an integer", lineno, key)
                if value < 0:
                    raise ParseError(f"Expected a non-negative integer", lineno, key)
            attrs[key] = value
        for key in REQUIRED_ATTRS.get(kind, ()):
            if key not in attrs:
                raise ParseError(f"Missing attribute for {kind}", lineno, key)
        if kind == "input" and not self.p_shape.match(str(attrs["shape"])):
            raise ParseError("Shape must read like 3x32x32", lineno, "shape")
        if kind == "activation" and attrs.get("fn", "relu") != "relu":
            raise ParseError("Only relu activations are supported", lineno, "fn")
        if kind == "pool" and attrs.get("op", "avg") not in ("avg", "max"):
            raise ParseError("Pool op must be avg or max", lineno, "op")
        if kind == "pool" and not attrs.get("global") and "kernel" not in attrs:
            raise ParseError("Pool needs kernel= or global=1", lineno, "kernel")
        return LayerNode(node_id, kind, attrs, lineno)


def parse_arch(spec_text, name="arch"):
    """Parse and validate architecture text into an ``ArchGraph``."""
    return ArchParser(spec_text, name=name).parse()


def resolve_arch_path(name_or_path):
    path = Path(name_or_path)
    if path.exists():
        return path
    shipped = ARCH_DIR / f"{name_or_path}.arch"
    if shipped.exists():
        return shipped
    raise FileNotFoundError(f"Architecture file not found: {name_or_path}")


def read_arch(name_or_path):
    """Read a shipped architecture by name (e.g. ``resnet20``) or a path."""
    path = resolve_arch_path(name_or_path)
    return parse_arch(path.read_text(encoding="ascii"), name=path.stem)


@dataclass(frozen=True)
class AugmentationScope:
    selected_ids: tuple
    mode: str = "all"
    k: Optional[int] = None

    def __post_init__(self):
        if self.mode not in SCOPE_MODES:
            raise ValueError(f"Invalid scope mode: {self.mode}")

    def describe(self):
        if self.mode == "all":
            return "all"
        if self.mode == "top_k":
            return f"top{self.k}"
        return "explicit:" + ",".join(self.selected_ids)


def parse_scope_mode(mode):
    """
    Normalize the accepted scope spellings: ``"all"``, ``"top7"``,
    ``("top_k", 7)``, ``"explicit:c1,c2"`` or a sequence of layer ids.
    """
    if isinstance(mode, str):
        if mode == "all":
            return "all", None
        m_top = re.match(R"^top_?k?\(?(\d+)\)?$", mode)
        if m_top:
            return "top_k", int(m_top.group(1))
        if mode.startswith("explicit:"):
            ids = [s.strip() for s in mode[len("explicit:"):].split(",")]
            return "explicit_list", tuple(s for s in ids if s)
        raise ValueError(f"Invalid scope mode: {mode}")
    if isinstance(mode, tuple) and len(mode) == 2 and mode[0] == "top_k":
        return "top_k", int(mode[1])
    return "explicit_list", tuple(mode)


def make_scope(arch, mode="all"):
    """Select the parameterized layers that become random gated blocks."""
    kind, arg = parse_scope_mode(mode)
    ids = arch.param_layer_ids
    if kind == "all":
        if not ids:
            raise ValueError("Architecture has no augmentable layers")
        return AugmentationScope(tuple(ids), "all")
    if kind == "top_k":
        if not 1 <= arg <= len(ids):
            raise ValueError(f"k out of range [1, {len(ids)}]: {arg}")
        return AugmentationScope(tuple(ids[:arg]), "top_k", arg)
    unknown = [i for i in arg if i not in ids]
    if unknown:
        raise ValueError(f"Not parameterized layers: {', '.join(unknown)}")
    if not arg:
        raise ValueError("Explicit scope selects no layers")
    selected = tuple(i for i in ids if i in set(arg))
    return AugmentationScope(selected, "explicit_list")


@dataclass(frozen=True)
class RGNSpec:
    base: ArchGraph
    scope: AugmentationScope
    n: int

    @property
    def L(self):
        return len(self.scope.selected_ids)

    @property
    def m(self):
        return self.base.operator_count

    @property
    def gated_ids(self):
        return self.scope.selected_ids

    @property
    def is_degenerate(self):
        return self.n == 1

    def digest(self):
        text = f"{self.base.to_text()}scope={self.scope.describe()}\nn={self.n}\n"
        return hashlib.sha256(text.encode()).hexdigest()


def build_rgn_spec(arch, scope, n):
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ValueError(f"Augmentation factor must be an integer >= 1: {n}")
    outside = [i for i in scope.selected_ids if i not in arch.param_layer_ids]
    if outside:
        raise ValueError(f"Scope is not a subset of the architecture: {outside}")
    if not scope.selected_ids:
        raise ValueError("Scope selects no layers")
    spec = RGNSpec(arch, scope, n)
    assert spec.L <= spec.m
    return spec
