#!/usr/bin/env python3
"""
Random gated network runtime.

A random gated network (RGN) replaces each selected parameterized layer of a
base architecture with a block of ``n`` independently initialized replicas.
A path picks one replica per block; executing a path runs exactly one
replica per block, so activation memory is that of the base network.
"""

import hashlib
import logging
import itertools
import contextlib
from typing import NewType, Optional
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from eio.archspec import PARAM_KINDS


logger = logging.getLogger(__name__)

GateIndex = NewType("GateIndex", int)
DISTINCT_RETRIES = 1000
ENUMERATE_LIMIT = 4096


class InfeasiblePathError(RuntimeError):
    pass


@dataclass(frozen=True)
class Path:
    gates: tuple

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(int(g) for g in self.gates))

    def __len__(self):
        return len(self.gates)

    def __getitem__(self, ix):
        return self.gates[ix]

    def __iter__(self):
        return iter(self.gates)

    def __str__(self):
        return self.label

    @property
    def label(self):
        return "-".join(str(g) for g in self.gates)

    @classmethod
    def from_label(cls, label):
        return cls(tuple(int(s) for s in label.split("-")))

    def differs_within(self, other, l):
        """True if at least one of the first ``l`` gates differs."""
        return self.gates[:l] != other.gates[:l]


def top_l_distinct(paths, l):
    """Check that every pair of paths differs somewhere in the first l gates."""
    prefixes = [p.gates[:l] for p in paths]
    return len(set(prefixes)) == len(prefixes)


@contextlib.contextmanager
def eval_mode(model):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def parameter_hash(module):
    """SHA-256 over every state tensor, in state-dict order."""
    digest = hashlib.sha256()
    for key, value in module.state_dict().items():
        digest.update(key.encode())
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _scale_grad(value, gamma):
    # Identity forward; the backward pass multiplies the gradient by gamma.
    return value.detach() + gamma * (value - value.detach())


class ConvUnit(nn.Module):
    """Convolution and its fused batchnorm; the unit a gate selects."""
    def __init__(self, node, bn_node=None):
        super().__init__()
        self.conv = nn.Conv2d(
                node.get("in"),
                node.get("out"),
                node.get("kernel"),
                stride=node.get("stride", 1),
                padding=node.get("padding", 0),
                bias=bool(node.get("bias", 0)),
        )
        nn.init.kaiming_normal_(
                self.conv.weight, mode="fan_in", nonlinearity="relu")
        if bn_node is not None:
            self.bn = nn.BatchNorm2d(bn_node.get("features"))
        else:
            self.bn = None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return x


class LinearUnit(nn.Linear):
    def forward(self, x):
        return super().forward(torch.flatten(x, 1))


def make_unit(arch, node_id):
    node = arch[node_id]
    if node.kind == "conv":
        bn_id = arch.fused_bn(node_id)
        return ConvUnit(node, arch[bn_id] if bn_id else None)
    if node.kind == "linear":
        return LinearUnit(
                node.get("in"), node.get("out"), bias=bool(node.get("bias", 1)))
    if node.kind == "batchnorm":
        if node.get("dims", 2) == 1:
            return nn.BatchNorm1d(node.get("features"))
        return nn.BatchNorm2d(node.get("features"))
    raise ValueError(f"Layer kind has no parameters: {node.kind}")


class RandomGatedBlock(nn.Module):
    def __init__(self, block_id, replicas):
        super().__init__()
        self.block_id = block_id
        self.replicas = nn.ModuleList(replicas)
        self.calls = 0

    @property
    def n(self):
        return len(self.replicas)

    def forward(self, x, gate):
        self.calls += 1
        return self.replicas[gate](x)


class GraphNet(nn.Module):
    """Executes an ``ArchGraph`` in topological order."""
    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self._skip_gamma = None
        self._fused_bns = frozenset(arch.fused.values())

    @property
    def has_skip_connections(self):
        return self.arch.has_skip_connections

    @contextlib.contextmanager
    def skip_gradient(self, gamma):
        """Scale gradients through residual branches by ``gamma``."""
        previous = self._skip_gamma
        self._skip_gamma = gamma
        try:
            yield self
        finally:
            self._skip_gamma = previous

    def _check_input(self, x):
        expected = tuple(self.arch.input_shape)
        if x.dim() != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                    f"Input shape {tuple(x.shape)} does not match "
                    f"(batch, {', '.join(map(str, expected))})")

    def _execute(self, x, apply_layer, tap=None):
        arch = self.arch
        values = {}
        for node_id in arch.order:
            if node_id in self._fused_bns:
                continue
            node = arch[node_id]
            preds = arch.predecessors(node_id)
            if node.kind == "input":
                out = x
            elif node.kind in PARAM_KINDS or node.kind == "batchnorm":
                out = apply_layer(node_id, values[preds[0]])
                bn_id = arch.fused_bn(node_id)
                if bn_id is not None:
                    values[bn_id] = out
            elif node.kind == "activation":
                out = F.relu(values[preds[0]])
            elif node.kind == "pool":
                out = self._pool(node, values[preds[0]])
            elif node.kind == "add":
                out = self._add(node, preds, values)
            else:  # output
                out = values[preds[0]]
            values[node_id] = out
        logits = values[arch.output_id]
        return logits, (values[tap] if tap is not None else None)

    @staticmethod
    def _pool(node, x):
        op = node.get("op", "avg")
        if node.get("global"):
            if op == "avg":
                return F.adaptive_avg_pool2d(x, 1)
            return F.adaptive_max_pool2d(x, 1)
        kernel = node.get("kernel")
        stride = node.get("stride", kernel)
        padding = node.get("padding", 0)
        if op == "avg":
            return F.avg_pool2d(x, kernel, stride=stride, padding=padding)
        return F.max_pool2d(x, kernel, stride=stride, padding=padding)

    def _add(self, node, preds, values):
        # Without an explicit ``skip=`` the earliest-declared input is taken
        # to be the skip connection.
        skip = node.get("skip")
        if skip is None:
            skip = min(preds, key=lambda p: self.arch[p].line)
        out = None
        for pred in preds:
            value = values[pred]
            if self._skip_gamma is not None and pred != skip:
                value = _scale_grad(value, self._skip_gamma)
            out = value if out is None else out + value
        return out


class RGNModel(GraphNet):
    """
    Random gated network built from an ``RGNSpec``.

    Parameters
    ----------
    spec : RGNSpec
    seed : int
        Seed for replica initialization; the global torch RNG is untouched.
    """
    def __init__(self, spec, seed=0):
        super().__init__(spec.base)
        self.spec = spec
        arch = spec.base
        self.block_index = {node_id: i for i, node_id in enumerate(spec.gated_ids)}
        self._tap_nodes = [arch.tap_node(node_id) for node_id in spec.gated_ids]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.blocks = nn.ModuleList(
                    RandomGatedBlock(
                        node_id,
                        [make_unit(arch, node_id) for _ in range(spec.n)],
                    )
                    for node_id in spec.gated_ids
            )
            self.shared = nn.ModuleDict({
                    node_id: make_unit(arch, node_id)
                    for node_id in arch.layer_ids
                    if node_id not in self.block_index
            })

    @property
    def L(self):
        return self.spec.L

    @property
    def n(self):
        return self.spec.n

    @property
    def replica_forwards(self):
        return sum(block.calls for block in self.blocks)

    def reset_counters(self):
        for block in self.blocks:
            block.calls = 0

    def check_path(self, path):
        gates = tuple(int(g) for g in path)
        if len(gates) != self.L:
            raise ValueError(
                    f"Path length {len(gates)} does not match L={self.L}")
        if any(not 0 <= g < self.n for g in gates):
            raise ValueError(f"Gate out of range [0, {self.n}): {gates}")
        return gates

    def forward(self, x, path=None, tap_layer=None):
        """
        Run one path. Returns the logits, or ``(logits, features)`` when
        ``tap_layer`` (1-based gated block index) is given. ``path`` may be
        omitted only for ``n == 1``.
        """
        if path is None:
            if self.n != 1:
                raise ValueError("A path is required when n > 1")
            path = (0,) * self.L
        gates = self.check_path(path)
        self._check_input(x)
        tap = None
        if tap_layer is not None:
            if not 1 <= tap_layer <= self.L:
                raise ValueError(f"tap_layer out of range [1, {self.L}]: {tap_layer}")
            tap = self._tap_nodes[tap_layer - 1]

        def apply_layer(node_id, h):
            ix = self.block_index.get(node_id)
            if ix is None:
                return self.shared[node_id](h)
            return self.blocks[ix](h, gates[ix])

        logits, features = self._execute(x, apply_layer, tap)
        if tap_layer is None:
            return logits
        return logits, features

    def unit_for(self, node_id, path=None):
        ix = self.block_index.get(node_id)
        if ix is None:
            return self.shared[node_id]
        gate = 0 if path is None else path[ix]
        return self.blocks[ix].replicas[gate]

    def load_base_parameters(self, base):
        """Copy a base network's layers into every replica and shared layer."""
        for node_id in self.arch.layer_ids:
            state = base.layers[node_id].state_dict()
            ix = self.block_index.get(node_id)
            if ix is None:
                self.shared[node_id].load_state_dict(state)
            else:
                for replica in self.blocks[ix].replicas:
                    replica.load_state_dict(state)
        return self


@dataclass(frozen=True)
class Provenance:
    kind: str
    rgn_hash: Optional[str] = None
    path: Optional[Path] = None
    seed: Optional[int] = None
    finetuned: bool = False

    def to_dict(self):
        return {
                "kind": self.kind,
                "rgn_hash": self.rgn_hash,
                "path": self.path.label if self.path is not None else None,
                "seed": self.seed,
                "finetuned": self.finetuned,
        }

    @classmethod
    def from_dict(cls, d):
        path = Path.from_label(d["path"]) if d.get("path") else None
        return cls(d["kind"], d.get("rgn_hash"), path, d.get("seed"),
                   bool(d.get("finetuned", False)))


class StandaloneModel(GraphNet):
    """Single-path network over the base architecture, without gates."""
    def __init__(self, arch, seed=0, provenance=None):
        super().__init__(arch)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.layers = nn.ModuleDict({
                    node_id: make_unit(arch, node_id)
                    for node_id in arch.layer_ids
            })
        if provenance is None:
            provenance = Provenance("standard", seed=seed)
        self.provenance = provenance

    def forward(self, x):
        self._check_input(x)
        logits, _ = self._execute(
                x, lambda node_id, h: self.layers[node_id](h))
        return logits


class PathModel(nn.Module):
    """View of one RGN path as an ordinary classifier; shares parameters."""
    def __init__(self, rgn, path):
        super().__init__()
        self.rgn = rgn
        self.path = Path(rgn.check_path(path))

    @property
    def has_skip_connections(self):
        return self.rgn.has_skip_connections

    def skip_gradient(self, gamma):
        return self.rgn.skip_gradient(gamma)

    def forward(self, x):
        return self.rgn(x, self.path)


def _spec_of(obj):
    return getattr(obj, "spec", obj)


def sample_gate(n, rng):
    """Index of the single open gate, uniform over ``[0, n)``."""
    if n < 1:
        raise ValueError(f"Augmentation factor must be >= 1: {n}")
    return GateIndex(int(rng.integers(n)))


def sample_path(rgn, rng):
    spec = _spec_of(rgn)
    return Path(tuple(sample_gate(spec.n, rng) for _ in range(spec.L)))


def sample_distinct_paths(rgn, p, l, rng, max_retries=DISTINCT_RETRIES):
    """
    Sample ``p`` paths whose first ``l`` gates differ pairwise. Rejection
    sampling is tried first; once the retry budget is spent, distinct
    prefixes are assigned directly and the remaining gates drawn freely.
    """
    spec = _spec_of(rgn)
    if p < 2:
        raise ValueError(f"Need at least two paths: p={p}")
    if not 1 <= l <= spec.L:
        raise ValueError(f"Distillation layer out of range [1, {spec.L}]: {l}")
    if spec.n ** l < p:
        raise InfeasiblePathError(
                f"Only {spec.n ** l} distinct prefixes for p={p} (n={spec.n}, l={l})")
    for _ in range(max_retries):
        paths = [sample_path(spec, rng) for _ in range(p)]
        if top_l_distinct(paths, l):
            return paths
    logger.debug(f"Rejection budget spent (p={p}, l={l}); assigning prefixes")
    if spec.n ** l <= ENUMERATE_LIMIT:
        prefixes = list(itertools.product(range(spec.n), repeat=l))
        chosen = rng.choice(len(prefixes), size=p, replace=False)
        heads = [prefixes[int(i)] for i in chosen]
    else:
        heads = []
        while len(heads) < p:
            head = tuple(sample_gate(spec.n, rng) for _ in range(l))
            if head not in heads:
                heads.append(head)
    paths = []
    for head in heads:
        tail = tuple(sample_gate(spec.n, rng) for _ in range(spec.L - l))
        paths.append(Path(head + tail))
    if not top_l_distinct(paths, l):
        raise InfeasiblePathError("Could not assign distinct prefixes")
    return paths


def forward(rgn, path, x, tap_layer=None):
    """Path-conditioned forward returning ``(logits, features or None)``."""
    if tap_layer is None:
        return rgn(x, path), None
    return rgn(x, path, tap_layer=tap_layer)


def count_paths(spec):
    spec = _spec_of(spec)
    return spec.n ** spec.L


def iter_paths(spec):
    spec = _spec_of(spec)
    for gates in itertools.product(range(spec.n), repeat=spec.L):
        yield Path(gates)


def derive_model(rgn, path, rgn_hash=None):
    """
    Copy one path's replicas and the shared layers into a standalone model.
    The copies are independent of the RGN's parameters.
    """
    gates = Path(rgn.check_path(path))
    if rgn_hash is None:
        rgn_hash = parameter_hash(rgn)
    provenance = Provenance("derived", rgn_hash=rgn_hash, path=gates)
    model = StandaloneModel(rgn.arch, provenance=provenance)
    ref = next(rgn.parameters())
    model.to(device=ref.device, dtype=ref.dtype)
    for node_id in rgn.arch.layer_ids:
        source = rgn.unit_for(node_id, gates)
        model.layers[node_id].load_state_dict(source.state_dict())
    model.train(rgn.training)
    return model


def random_gated_inference(rgn, x, rng, per_sample=False):
    """
    Forward with a freshly sampled path per batch, or per input when
    ``per_sample`` is set.
    """
    with torch.no_grad():
        if not per_sample:
            return rgn(x, sample_path(rgn, rng))
        outs = [rgn(x[i:i+1], sample_path(rgn, rng)) for i in range(x.shape[0])]
        return torch.cat(outs, dim=0)
