#!/usr/bin/env python3
"""
Adversarial attacks and the robustness evaluation protocols.

Attacks are momentum-iterative sign-gradient methods under an L-infinity
budget: PGD with random starts, M-DI2-FGSM (random resize-and-pad of the
input at every step) and SGM (gradients through residual branches decayed
during backward). Each can maximize cross-entropy or minimize the C&W
margin. Protocol accuracy is all-or-nothing: a sample counts as correct
only when it is classified correctly clean and under every adversarial
version of it.
"""

import json
import hashlib
import logging
import warnings
import contextlib
import dataclasses
from pathlib import Path
from typing import Optional
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from eio.rgn import eval_mode, parameter_hash
from eio.seeding import make_stream


logger = logging.getLogger(__name__)

METHODS = ("pgd", "mdi2fgsm", "sgm")
LOSSES = ("cross_entropy", "cw")
ENSEMBLE_RULES = ("mean-prob", "mean-logit", "majority-vote")


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    method: str = "pgd"
    loss: str = "cross_entropy"
    eps: float = 0.03
    steps: int = 100
    step_size: Optional[float] = None
    random_starts: int = 1
    momentum: float = 1.0
    random_init: Optional[bool] = None
    di_prob: float = 0.5
    resize_range: tuple = (0.9, 1.0)
    sgm_gamma: float = 0.2
    cw_kappa: float = 0.0
    worst_case: bool = False

    @property
    def step(self):
        """Per-step magnitude; ``eps / 5`` unless set."""
        if self.step_size is None:
            return self.eps / 5
        return self.step_size

    def uses_random_init(self, method=None):
        if self.random_init is not None:
            return self.random_init
        return (method or self.method) == "pgd"

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"Unknown attack method: {self.method}")
        if self.loss not in LOSSES:
            raise ValueError(f"Unknown attack loss: {self.loss}")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0: {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1: {self.steps}")
        if self.random_starts < 1:
            raise ValueError(f"random_starts must be >= 1: {self.random_starts}")
        lo, hi = self.resize_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"Invalid resize range: {self.resize_range}")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def describe(self):
        return f"{self.method}/{self.loss}"


def cw_margins(logits, y, kappa=0.0):
    """Per-sample ``max(z_y - max_{c != y} z_c, -kappa)``."""
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ValueError("C&W margin needs logits over at least two classes")
    true = logits.gather(1, y.view(-1, 1)).squeeze(1)
    mask = F.one_hot(y, logits.shape[1]).bool()
    other = logits.masked_fill(mask, float("-inf")).max(dim=1).values
    return torch.clamp(true - other, min=-kappa)


def cw_margin_loss(logits, y, kappa=0.0):
    """Batch mean of the C&W margin; attacks drive it down."""
    return cw_margins(logits, y, kappa).mean()


def _attack_objective(logits, y, spec):
    # Summed over the batch, so each sample's gradient is its own.
    if spec.loss == "cw":
        return -cw_margins(logits, y, spec.cw_kappa).sum()
    return F.cross_entropy(logits, y, reduction="sum")


def _project(z, lower, upper):
    return torch.min(torch.max(z, lower), upper).clamp(0, 1)


def _diverse_input(x, spec, rng):
    """Random shrink within ``resize_range`` and zero padding back to size."""
    apply = rng.random() < spec.di_prob
    h, w = x.shape[-2:]
    lo = max(1, int(round(spec.resize_range[0] * h)))
    hi = max(lo, int(round(spec.resize_range[1] * h)))
    rh = int(rng.integers(lo, hi + 1))
    rw = max(1, min(w, int(round(rh * w / h))))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    if not apply:
        return x
    resized = F.interpolate(x, size=(rh, rw), mode="nearest")
    return F.pad(resized, (left, w - rw - left, top, h - rh - top), value=0.0)


def resolve_method(model, spec):
    """Method actually run and whether SGM fell back to PGD."""
    if spec.method == "sgm" and not getattr(model, "has_skip_connections", False):
        return "pgd", True
    return spec.method, False


def _iterate(model, x, y, spec, method, rng):
    x = x.detach()
    lower = x - spec.eps
    upper = x + spec.eps
    x_adv = x.clone()
    if spec.uses_random_init(method) and spec.eps > 0:
        noise = rng.uniform(-spec.eps, spec.eps, size=tuple(x.shape))
        x_adv = _project(
                x_adv + torch.as_tensor(noise, dtype=x.dtype, device=x.device),
                lower, upper)
    g = torch.zeros_like(x)
    view = (-1,) + (1,) * (x.dim() - 1)
    for _ in range(spec.steps):
        x_adv.requires_grad_(True)
        if method == "mdi2fgsm":
            x_in = _diverse_input(x_adv, spec, rng)
        else:
            x_in = x_adv
        if method == "sgm":
            with model.skip_gradient(spec.sgm_gamma):
                logits = model(x_in)
        else:
            logits = model(x_in)
        objective = _attack_objective(logits, y, spec)
        grad, = torch.autograd.grad(objective, x_adv)
        with torch.no_grad():
            if spec.momentum > 0:
                norm = grad.abs().flatten(1).mean(dim=1).clamp_min(1e-12)
                g = spec.momentum * g + grad / norm.view(view)
            else:
                g = grad
            x_adv = _project(x_adv + spec.step * g.sign(), lower, upper)
        x_adv = x_adv.detach()
    return x_adv


def _worst_case(model, x, y, versions):
    worst = versions[0].clone()
    found = torch.zeros(len(y), dtype=torch.bool, device=y.device)
    with torch.no_grad():
        for x_adv in versions:
            wrong = model(x_adv).argmax(dim=1) != y
            take = wrong & ~found
            worst[take] = x_adv[take]
            found |= wrong
    return worst


def attack(model, x, y, spec, rng):
    """
    Generate one adversarial batch per random start, or a single per-sample
    worst case when ``spec.worst_case`` is set. The model runs in eval mode
    and its parameters receive no gradients.
    """
    spec.validate()
    method, fell_back = resolve_method(model, spec)
    if fell_back:
        warnings.warn("SGM needs skip connections; falling back to PGD")
    with eval_mode(model):
        versions = [
                _iterate(model, x, y, spec, method, rng)
                for _ in range(spec.random_starts)
        ]
        if spec.worst_case:
            versions = [_worst_case(model, x, y, versions)]
    return versions


def predict(model, x, batch_size=500):
    with eval_mode(model), torch.no_grad():
        preds = [
                model(x[i:i+batch_size]).argmax(dim=1)
                for i in range(0, len(x), batch_size)
        ]
    return torch.cat(preds)


def correct_flags(model, x, y, batch_size=500):
    return (predict(model, x, batch_size) == y).cpu().numpy()


def all_or_nothing(correct_flags):
    """Fraction of samples (rows) correct under every attack version (columns)."""
    flags = np.asarray(correct_flags, dtype=bool)
    if flags.ndim != 2 or flags.shape[1] == 0:
        raise ProtocolError("All-or-nothing accuracy needs a non-empty attack axis")
    if flags.shape[0] == 0:
        raise ProtocolError("All-or-nothing accuracy needs at least one sample")
    return float(flags.all(axis=1).mean())


class Ensemble(nn.Module):
    """Multi-path deployment: members combined by ``rule``."""
    def __init__(self, members, rule="mean-prob"):
        super().__init__()
        if rule not in ENSEMBLE_RULES:
            raise ValueError(f"Unknown ensemble rule: {rule}")
        if not members:
            raise ValueError("Ensemble needs at least one member")
        self.members = nn.ModuleList(members)
        self.rule = rule

    @property
    def has_skip_connections(self):
        return all(
                getattr(m, "has_skip_connections", False) for m in self.members)

    @contextlib.contextmanager
    def skip_gradient(self, gamma):
        with contextlib.ExitStack() as stack:
            for member in self.members:
                stack.enter_context(member.skip_gradient(gamma))
            yield self

    def forward(self, x):
        outs = torch.stack([m(x) for m in self.members])
        if self.rule == "mean-logit":
            return outs.mean(dim=0)
        if self.rule == "mean-prob":
            probs = F.softmax(outs, dim=2).mean(dim=0)
            return probs.clamp_min(1e-12).log()
        # Forward value is the vote count (ties go to the lowest class index);
        # gradients are those of the mean-probability combination.
        votes = F.one_hot(outs.argmax(dim=2), outs.shape[2]).sum(dim=0).to(outs.dtype)
        surrogate = F.softmax(outs, dim=2).mean(dim=0).clamp_min(1e-12).log()
        return votes + (surrogate - surrogate.detach())


@dataclass
class SurrogateSet:
    models: list
    ids: list

    def __post_init__(self):
        if len(self.models) != len(self.ids):
            raise ValueError("Surrogate models and ids differ in length")

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(zip(self.ids, self.models))

    def check_disjoint(self, target):
        target_ptrs = {p.data_ptr() for p in target.parameters()}
        for sid, model in self:
            if any(p.data_ptr() in target_ptrs for p in model.parameters()):
                raise ProtocolError(f"Surrogate {sid} shares parameters with the target")


class AdversarialCache:
    """
    Adversarial sets keyed by (surrogate, method, loss, eps, start) plus a
    fingerprint of the full attack spec, the surrogate's parameters and the
    samples; each array holds every sample, so the row is the sample index.
    An entry whose fingerprint no longer matches is regenerated and replaced.
    """
    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._arrays = {}
        if self.path is not None and self.path.exists():
            with np.load(self.path, allow_pickle=False) as data:
                self._arrays = {k: data[k] for k in data.files}

    def __contains__(self, key):
        return key in self._arrays

    def __len__(self):
        return len(self._arrays)

    @staticmethod
    def fingerprint(spec, model, x, y):
        digest = hashlib.sha256()
        fields = dataclasses.asdict(spec)
        fields["resize_range"] = list(fields["resize_range"])
        digest.update(json.dumps(fields, sort_keys=True).encode())
        digest.update(parameter_hash(model).encode())
        for tensor in (x, y):
            digest.update(str(tuple(tensor.shape)).encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()[:16]

    @staticmethod
    def key(surrogate, method, loss, eps, start, fingerprint=""):
        return f"{surrogate}|{method}|{loss}|{eps:.6g}|{start}|{fingerprint}"

    def get(self, key, like):
        if key not in self._arrays:
            return None
        return torch.as_tensor(self._arrays[key], dtype=like.dtype, device=like.device)

    def put(self, key, x_adv):
        prefix = key.rsplit("|", 1)[0] + "|"
        for stale in [k for k in self._arrays if k.startswith(prefix) and k != key]:
            logger.debug(f"Replacing stale adversarial set {stale}")
            del self._arrays[stale]
        self._arrays[key] = x_adv.detach().cpu().numpy()

    def save(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("wb") as f:
            np.savez(f, **self._arrays)


def generate(model, x, y, spec, rng, batch_size=250, cache=None, source_id=None):
    """Run ``attack`` over ``x`` in chunks; returns the list of versions."""
    n_versions = 1 if spec.worst_case else spec.random_starts
    keys = None
    if cache is not None and source_id is not None:
        fingerprint = cache.fingerprint(spec, model, x, y)
        keys = [
                cache.key(source_id, spec.method, spec.loss, spec.eps, k, fingerprint)
                for k in range(n_versions)
        ]
        if all(k in cache for k in keys):
            return [cache.get(k, x) for k in keys]
    chunks = [[] for _ in range(n_versions)]
    for i in range(0, len(x), batch_size):
        versions = attack(model, x[i:i+batch_size], y[i:i+batch_size], spec, rng)
        for k, x_adv in enumerate(versions):
            chunks[k].append(x_adv)
    versions = [torch.cat(c) for c in chunks]
    if keys is not None:
        for key, x_adv in zip(keys, versions):
            cache.put(key, x_adv)
    return versions


@dataclass
class EvalRecord:
    eps: float
    clean_accuracy: float
    accuracy: float
    min_attack_accuracy: float
    n_attacks: int


@dataclass
class EvalReport:
    model_id: str
    protocol: str
    records: list
    inventory: list
    n_samples: int
    seed: int
    surrogate_ids: tuple = ()
    fallbacks: tuple = ()
    config_hash: Optional[str] = None

    @property
    def inventory_hash(self):
        text = "\n".join(self.inventory)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def accuracy_at(self, eps):
        for record in self.records:
            if np.isclose(record.eps, eps):
                return record.accuracy
        raise KeyError(f"No record at eps={eps}")

    def to_frame(self):
        rows = [
                {
                    "model_id": self.model_id,
                    "protocol": self.protocol,
                    "eps": r.eps,
                    "accuracy": r.accuracy,
                    "clean_accuracy": r.clean_accuracy,
                    "min_attack_accuracy": r.min_attack_accuracy,
                    "n_attacks": r.n_attacks,
                    "n_samples": self.n_samples,
                    "seed": self.seed,
                    "attack_inventory_hash": self.inventory_hash,
                    "surrogates": ",".join(self.surrogate_ids),
                    "config_hash": self.config_hash or "",
                }
                for r in self.records
        ]
        return pd.DataFrame(rows)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def to_jsonl(self, path):
        with Path(path).open("a") as f:
            for row in self.to_frame().to_dict(orient="records"):
                row["inventory"] = self.inventory
                row["fallbacks"] = list(self.fallbacks)
                f.write(json.dumps(row) + "\n")


def _record(eps, clean, adv_columns):
    flags = np.stack(adv_columns, axis=1) & clean[:, None]
    return EvalRecord(
            eps=float(eps),
            clean_accuracy=float(clean.mean()),
            accuracy=all_or_nothing(flags),
            min_attack_accuracy=float(flags.mean(axis=0).min()),
            n_attacks=flags.shape[1],
    )


@dataclass
class BlackboxConfig:
    methods: tuple = ("pgd", "mdi2fgsm", "sgm")
    losses: tuple = ("cross_entropy", "cw")
    pgd_starts: int = 3
    steps: int = 100
    step_ratio: float = 0.2
    momentum: float = 1.0
    di_prob: float = 0.5
    resize_range: tuple = (0.9, 1.0)
    sgm_gamma: float = 0.2
    cw_kappa: float = 0.0
    batch_size: int = 250


@dataclass
class WhiteboxConfig:
    steps: int = 50
    step_ratio: float = 0.2
    starts: int = 5
    momentum: float = 0.0
    loss: str = "cross_entropy"
    batch_size: int = 250


def blackbox_specs(cfg, eps):
    specs = []
    for method in cfg.methods:
        for loss in cfg.losses:
            specs.append(AttackSpec(
                    method=method,
                    loss=loss,
                    eps=eps,
                    steps=cfg.steps,
                    step_size=eps * cfg.step_ratio,
                    random_starts=cfg.pgd_starts if method == "pgd" else 1,
                    momentum=cfg.momentum,
                    di_prob=cfg.di_prob,
                    resize_range=tuple(cfg.resize_range),
                    sgm_gamma=cfg.sgm_gamma,
                    cw_kappa=cfg.cw_kappa,
            ))
    return specs


def blackbox_inventory(surrogate_ids, cfg, eps=0.0):
    return [
            f"{sid}/{spec.method}/{spec.loss}/start{k}"
            for sid in surrogate_ids
            for spec in blackbox_specs(cfg, eps)
            for k in range(spec.random_starts)
    ]


def blackbox_protocol(target, surrogates, eps_list, samples, rng, cfg=None,
                      model_id="target", cache=None, config_hash=None, seed=0):
    """
    Transfer attacks from every surrogate with every method/loss pair;
    all-or-nothing accuracy of ``target`` per eps.
    """
    if len(surrogates) == 0:
        raise ProtocolError("Black-box evaluation needs at least one surrogate")
    cfg = cfg or BlackboxConfig()
    surrogates.check_disjoint(target)
    x, y = samples
    clean = correct_flags(target, x, y, cfg.batch_size)
    # One stream per attack, so cached and fresh generation agree.
    base = int(rng.integers(2**32))
    fallbacks = set()
    records = []
    for eps in eps_list:
        columns = []
        for sid, surrogate in surrogates:
            for spec in blackbox_specs(cfg, eps):
                if resolve_method(surrogate, spec)[1]:
                    fallbacks.add(f"{sid}/{spec.method}")
                logger.info(f"eps={eps:g} {sid} {spec.describe()}")
                spec_rng = make_stream(base, f"{sid}/{spec.describe()}/{eps:.6g}")
                versions = generate(
                        surrogate, x, y, spec, spec_rng, cfg.batch_size,
                        cache=cache, source_id=sid)
                columns += [
                        correct_flags(target, v, y, cfg.batch_size)
                        for v in versions
                ]
        records.append(_record(eps, clean, columns))
    if cache is not None:
        cache.save()
    return EvalReport(
            model_id=model_id,
            protocol="blackbox",
            records=records,
            inventory=blackbox_inventory(surrogates.ids, cfg),
            n_samples=len(y),
            seed=seed,
            surrogate_ids=tuple(surrogates.ids),
            fallbacks=tuple(sorted(fallbacks)),
            config_hash=config_hash,
    )


def whitebox_protocol(target, eps_list, samples, rng, cfg=None,
                      model_id="target", config_hash=None, seed=0):
    """Multi-start PGD against the target itself; all-or-nothing per eps."""
    cfg = cfg or WhiteboxConfig()
    x, y = samples
    clean = correct_flags(target, x, y, cfg.batch_size)
    records = []
    for eps in eps_list:
        spec = AttackSpec(
                method="pgd",
                loss=cfg.loss,
                eps=eps,
                steps=cfg.steps,
                step_size=eps * cfg.step_ratio,
                random_starts=cfg.starts,
                momentum=cfg.momentum,
        )
        logger.info(f"eps={eps:g} white-box {spec.describe()} x{cfg.starts}")
        versions = generate(target, x, y, spec, rng, cfg.batch_size)
        columns = [correct_flags(target, v, y, cfg.batch_size) for v in versions]
        records.append(_record(eps, clean, columns))
    return EvalReport(
            model_id=model_id,
            protocol="whitebox",
            records=records,
            inventory=[f"self/pgd/{cfg.loss}/start{k}" for k in range(cfg.starts)],
            n_samples=len(y),
            seed=seed,
            config_hash=config_hash,
    )


@dataclass
class TransferMatrix:
    rates: np.ndarray
    eps: float
    model_ids: list = field(default_factory=list)
    config_hash: Optional[str] = None
    seed: int = 0

    def mean_off_diagonal(self):
        k = self.rates.shape[0]
        if k < 2:
            return float("nan")
        mask = ~np.eye(k, dtype=bool)
        return float(self.rates[mask].mean())

    def to_frame(self):
        return pd.DataFrame(self.rates, index=self.model_ids, columns=self.model_ids)

    def to_csv(self, path):
        df = self.to_frame()
        df["eps"] = self.eps
        df["seed"] = self.seed
        df["config_hash"] = self.config_hash or ""
        df.to_csv(path, index_label="source")


def transfer_matrix(models, spec, samples, rng, model_ids=None, batch_size=250,
                    config_hash=None, seed=0):
    """
    Entry (i, j): fraction of the samples target j classifies correctly that
    adversarial examples generated on model i turn into errors. With several
    random starts a sample counts as fooled if any start fools it.
    """
    if len(models) < 1:
        raise ProtocolError("Transfer matrix needs at least one model")
    if model_ids is None:
        model_ids = [f"m{i}" for i in range(len(models))]
    x, y = samples
    clean = [correct_flags(m, x, y, batch_size) for m in models]
    rates = np.zeros((len(models), len(models)))
    for i, source in enumerate(models):
        versions = generate(source, x, y, spec, rng, batch_size)
        for j, target in enumerate(models):
            fooled = np.zeros(len(y), dtype=bool)
            for x_adv in versions:
                fooled |= ~correct_flags(target, x_adv, y, batch_size)
            mask = clean[j]
            rates[i, j] = fooled[mask].mean() if mask.any() else 0.0
    return TransferMatrix(rates, float(spec.eps), list(model_ids), config_hash, seed)
