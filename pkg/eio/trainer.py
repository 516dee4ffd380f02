#!/usr/bin/env python3
"""
Training routines: random-path pretraining of an RGN, vulnerability
diversification (with the optional adversarial-training term), fine-tuning
of derived models and standard training of baselines and surrogates.
"""

import copy
import json
import time
import logging
import warnings
import dataclasses
from pathlib import Path
from typing import Optional
from multiprocessing import Pool
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from eio.attacks import AttackSpec, attack
from eio.data import DatasetError
from eio.distill import DistillConfig, distill_features
from eio.rgn import (Path as GatePath, PathModel, InfeasiblePathError,
        StandaloneModel, eval_mode, sample_path, sample_distinct_paths)
from eio.seeding import RngStreams


logger = logging.getLogger(__name__)


@dataclass
class SGDConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple = (100, 150)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps_per_epoch: Optional[int] = None
    seed: int = 0
    progress: bool = True

    def validate(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0: {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1: {self.batch_size}")
        for name in ("lr", "lr_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0: {getattr(self, name)}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        return self


@dataclass
class AdvTConfig:
    enabled: bool = False
    eps: float = 0.03
    steps: int = 10
    step_size: Optional[float] = None
    random_init: bool = True

    def attack_spec(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0: {self.eps}")
        return AttackSpec(
                method="pgd",
                loss="cross_entropy",
                eps=self.eps,
                steps=self.steps,
                step_size=self.step_size if self.step_size is not None else self.eps / 4,
                random_starts=1,
                momentum=0.0,
                random_init=self.random_init,
        )


@dataclass
class TrainConfig(SGDConfig):
    pretrain_epochs: int = 20
    paths_per_iter: int = 3
    max_l_resamples: int = 100
    distill: DistillConfig = field(default_factory=DistillConfig)
    advt: AdvTConfig = field(default_factory=AdvTConfig)

    def validate(self, L=None):
        super().validate()
        if self.pretrain_epochs < 0:
            raise ValueError(f"pretrain_epochs must be >= 0: {self.pretrain_epochs}")
        if self.paths_per_iter < 2:
            raise ValueError(f"paths_per_iter must be >= 2: {self.paths_per_iter}")
        self.distill.validate(L)
        if self.advt.enabled:
            self.advt.attack_spec()
        return self


@dataclass
class FinetuneConfig(SGDConfig):
    epochs: int = 40
    lr: float = 0.001
    lr_milestones: tuple = (20, 30)


@dataclass
class BatchPair:
    x_t: torch.Tensor
    y_t: torch.Tensor
    x_s: torch.Tensor
    y_s: torch.Tensor

    def __post_init__(self):
        if self.x_t.shape != self.x_s.shape:
            raise ValueError("Batch pair sizes differ")

    @classmethod
    def from_batches(cls, target, source):
        return cls(target[0], target[1], source[0], source[1])


@dataclass
class StepStats:
    layer: int
    paths: list
    losses: list
    lr: float
    resampled: int = 0
    advt_losses: list = field(default_factory=list)
    updates: int = 1
    distill_seconds: float = 0.0
    seconds: float = 0.0

    @property
    def loss(self):
        return float(np.sum(self.losses))


@dataclass
class TrainState:
    phase: str = "pretrain"
    epoch: int = 0
    steps: int = 0
    updates: int = 0
    best_accuracy: float = -1.0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class TrainLog:
    """Append-only JSON-lines record of steps and epochs."""
    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records = []

    def append(self, **record):
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as f:
                f.write(json.dumps(record) + "\n")

    @staticmethod
    def read(path):
        with Path(path).open() as f:
            return [json.loads(line) for line in f if line.strip()]

    def to_frame(self, kind=None):
        df = pd.DataFrame(self.records)
        if kind is not None and len(df):
            df = df[df["kind"] == kind]
        return df


def lr_for_epoch(epoch, cfg):
    """Step schedule: ``lr * gamma**k`` after the k-th milestone."""
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_gamma ** passed


def make_optimizer(model, cfg):
    return torch.optim.SGD(
            model.parameters(),
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
    )


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def evaluate_accuracy(model, x, y, batch_size=500):
    with eval_mode(model), torch.no_grad():
        correct = sum(
                int((model(x[i:i+batch_size]).argmax(dim=1) == y[i:i+batch_size]).sum())
                for i in range(0, len(x), batch_size)
        )
    return correct / len(y)


def rgn_accuracy(rgn, x, y, rng, n_paths=3, batch_size=500):
    """Mean clean accuracy over ``n_paths`` randomly sampled paths."""
    paths = [sample_path(rgn, rng) for _ in range(n_paths)]
    return float(np.mean([
            evaluate_accuracy(PathModel(rgn, p), x, y, batch_size) for p in paths
    ]))


def _check_dataset(dataset, cfg):
    if dataset.batches_per_epoch(cfg.batch_size, cfg.steps_per_epoch) == 0:
        raise DatasetError(
                f"{dataset.name}: no full batch of {cfg.batch_size} in {len(dataset)} samples")


def pretrain_epoch(rgn, dataset, cfg, optimizer, streams, epoch):
    rgn.train()
    losses = []
    for x, y in dataset.iter_batches(
            cfg.batch_size, epoch, cfg.seed, tag="pretrain", limit=cfg.steps_per_epoch):
        path = sample_path(rgn, streams["paths"])
        loss = F.cross_entropy(rgn(x, path), y)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def pretrain(rgn, dataset, cfg, streams=None, log=None):
    """Clean training of one random path per batch for ``pretrain_epochs``."""
    cfg.validate(rgn.L)
    _check_dataset(dataset, cfg)
    streams = streams or RngStreams(cfg.seed)
    optimizer = make_optimizer(rgn, cfg)
    for epoch in tqdm(range(cfg.pretrain_epochs), desc="pretrain", disable=not cfg.progress):
        set_lr(optimizer, lr_for_epoch(epoch, cfg))
        loss = pretrain_epoch(rgn, dataset, cfg, optimizer, streams, epoch)
        logger.info(f"pretrain epoch {epoch}: loss={loss:.4f}")
        if log is not None:
            log.append(kind="epoch", phase="pretrain", epoch=epoch, loss=loss,
                    lr=lr_for_epoch(epoch, cfg))
    return rgn


def _path_loss(rgn, j, paths, distilled, y_s):
    terms = [
            F.cross_entropy(rgn(batch.x_prime, paths[j]), y_s)
            for i, batch in enumerate(distilled)
            if i != j
    ]
    return torch.stack(terms).sum()


def _check_provenance(paths, distilled):
    if len(paths) != len(distilled):
        raise ValueError(f"{len(paths)} paths but {len(distilled)} distilled batches")
    if len(paths) < 2:
        raise ValueError("Cross training needs at least two paths")
    for i, (path, batch) in enumerate(zip(paths, distilled)):
        if batch.path != GatePath(tuple(path)):
            raise ValueError(
                    f"Distilled batch {i} comes from path {batch.path.label}, "
                    f"not {GatePath(tuple(path)).label}")


def cross_loss(rgn, paths, distilled, y_s):
    """
    Round-robin loss: path ``j`` is trained on every other path's distilled
    batch with the source labels. Mean over the batch, summed over the
    ``p - 1`` cross terms.
    """
    _check_provenance(paths, distilled)
    return [_path_loss(rgn, j, paths, distilled, y_s) for j in range(len(paths))]


def accumulate_gradients(rgn, paths, distilled, y_s, adversarial=None):
    """
    Backpropagate each path's loss separately into the shared ``.grad``
    buffers. ``adversarial[j]`` adds a clean-label term on path ``j``.
    Returns ``(losses, adversarial_losses)`` as floats.
    """
    _check_provenance(paths, distilled)
    losses = []
    adv_losses = []
    for j in range(len(paths)):
        loss = _path_loss(rgn, j, paths, distilled, y_s)
        losses.append(loss.item())
        if adversarial is not None:
            adv = F.cross_entropy(rgn(adversarial[j], paths[j]), y_s)
            adv_losses.append(adv.item())
            loss = loss + adv
        loss.backward()
    return losses, adv_losses


def sample_layer(rgn, p, rng, max_resamples=100):
    """
    Uniform distillation layer in ``[1, L]``, redrawn while fewer than ``p``
    distinct prefixes exist. Returns ``(l, redraws)``.
    """
    if rgn.n ** rgn.L < p:
        raise InfeasiblePathError(
                f"Only {rgn.n ** rgn.L} paths exist for p={p} (n={rgn.n}, L={rgn.L})")
    for redraws in range(max_resamples + 1):
        l = int(rng.integers(1, rgn.L + 1))
        if rgn.n ** l >= p:
            if redraws:
                warnings.warn(f"Resampled infeasible distillation layer {redraws} time(s)")
            return l, redraws
    raise InfeasiblePathError(
            f"No feasible distillation layer after {max_resamples} redraws (p={p}, n={rgn.n})")


def _distill_all(rgn, pair, paths, l, cfg, streams):
    return [
            distill_features(rgn, path, l, pair.x_t, pair.x_s, cfg.distill,
                    streams["distill"], pair.y_s)
            for path in paths
    ]


def _adversarial_inputs(rgn, pair, paths, cfg, streams):
    spec = cfg.advt.attack_spec()
    return [
            attack(PathModel(rgn, path), pair.x_s, pair.y_s, spec, streams["attack"])[0]
            for path in paths
    ]


def diversify_step(rgn, batch_pair, cfg, streams, optimizer, advt=False):
    """
    One diversification update: draw a layer and ``p`` top-l-distinct
    paths, distill each path's features at that layer, accumulate the
    cross-training gradients of all paths and apply a single optimizer step.
    """
    start = time.perf_counter()
    p = cfg.paths_per_iter
    l, redraws = sample_layer(rgn, p, streams["paths"], cfg.max_l_resamples)
    paths = sample_distinct_paths(rgn, p, l, streams["paths"])
    distilled = _distill_all(rgn, batch_pair, paths, l, cfg, streams)
    distill_seconds = time.perf_counter() - start
    adversarial = _adversarial_inputs(rgn, batch_pair, paths, cfg, streams) if advt else None
    rgn.train()
    optimizer.zero_grad()
    losses, adv_losses = accumulate_gradients(
            rgn, paths, distilled, batch_pair.y_s, adversarial)
    optimizer.step()
    return StepStats(
            layer=l,
            paths=[path.label for path in paths],
            losses=losses,
            lr=optimizer.param_groups[0]["lr"],
            resampled=redraws,
            advt_losses=adv_losses,
            distill_seconds=distill_seconds,
            seconds=time.perf_counter() - start,
    )


def diversify_step_advt(rgn, batch_pair, cfg, streams, optimizer):
    """``diversify_step`` plus a white-box PGD term per path on ``x_s``."""
    return diversify_step(rgn, batch_pair, cfg, streams, optimizer, advt=True)


def diversify_epoch(rgn, dataset, cfg, optimizer, streams, epoch, state, log=None):
    step_fn = diversify_step_advt if cfg.advt.enabled else diversify_step
    losses = []
    pairs = dataset.iter_batch_pairs(cfg.batch_size, epoch, cfg.seed, limit=cfg.steps_per_epoch)
    for target, source in pairs:
        stats = step_fn(rgn, BatchPair.from_batches(target, source), cfg, streams, optimizer)
        state.steps += 1
        state.updates += stats.updates
        losses.append(stats.loss)
        logger.debug(f"step {state.steps}: l={stats.layer} losses={stats.losses}")
        if log is not None:
            log.append(kind="step", phase="diversify", epoch=epoch, step=state.steps,
                    layer=stats.layer, paths=stats.paths, losses=stats.losses,
                    advt_losses=stats.advt_losses, lr=stats.lr,
                    seconds=round(stats.seconds, 4))
    return float(np.mean(losses))


def train(rgn, dataset, cfg, streams=None, log=None, state=None, restore=None,
          on_epoch=None, eval_data=None):
    """
    Pretraining followed by ``epochs`` of diversification.

    Parameters
    ----------
    state : TrainState, optional
        Where to resume; the default starts from scratch.
    restore : callable, optional
        Called with the optimizer of the resumed phase to load its state.
    on_epoch : callable, optional
        ``on_epoch(rgn, state, optimizer, streams, improved)`` after each epoch.
    eval_data : (x, y), optional
        Held-out batch for per-epoch clean accuracy over random paths.
    """
    cfg.validate(rgn.L)
    _check_dataset(dataset, cfg)
    streams = streams or RngStreams(cfg.seed)
    state = state or TrainState()
    phases = (
            ("pretrain", cfg.pretrain_epochs),
            ("diversify", cfg.epochs),
    )
    for phase, n_epochs in phases:
        if state.phase != phase:
            continue
        optimizer = make_optimizer(rgn, cfg)
        if restore is not None:
            restore(optimizer)
            restore = None
        epochs = range(state.epoch, n_epochs)
        for epoch in tqdm(epochs, desc=phase, disable=not cfg.progress):
            lr = lr_for_epoch(epoch, cfg)
            set_lr(optimizer, lr)
            if phase == "pretrain":
                loss = pretrain_epoch(rgn, dataset, cfg, optimizer, streams, epoch)
            else:
                loss = diversify_epoch(rgn, dataset, cfg, optimizer, streams, epoch, state, log)
            state.epoch = epoch + 1
            accuracy = None
            improved = False
            if eval_data is not None:
                accuracy = rgn_accuracy(rgn, *eval_data, streams["eval"])
                improved = phase == "diversify" and accuracy > state.best_accuracy
                if improved:
                    state.best_accuracy = accuracy
            logger.info(f"{phase} epoch {epoch}: loss={loss:.4f} lr={lr:g} accuracy={accuracy}")
            if log is not None:
                log.append(kind="epoch", phase=phase, epoch=epoch, loss=loss, lr=lr,
                        accuracy=accuracy, updates=state.updates)
            if on_epoch is not None:
                on_epoch(rgn, state, optimizer, streams, improved)
        state.phase = "diversify" if phase == "pretrain" else "done"
        state.epoch = 0
    return rgn, state


def sgd_epochs(model, dataset, cfg, tag="standard"):
    """Clean cross-entropy SGD on a single-path model."""
    optimizer = make_optimizer(model, cfg)
    for epoch in tqdm(range(cfg.epochs), desc=tag, disable=not cfg.progress):
        set_lr(optimizer, lr_for_epoch(epoch, cfg))
        model.train()
        losses = []
        for x, y in dataset.iter_batches(
                cfg.batch_size, epoch, cfg.seed, tag=tag, limit=cfg.steps_per_epoch):
            loss = F.cross_entropy(model(x), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        logger.info(f"{tag} epoch {epoch}: loss={np.mean(losses):.4f}")
    return model


def finetune(model, dataset, cfg):
    """Clean-data fine-tuning of a derived model; the input is not modified."""
    cfg.validate()
    tuned = copy.deepcopy(model)
    if cfg.epochs == 0:
        return tuned
    _check_dataset(dataset, cfg)
    sgd_epochs(tuned, dataset, cfg, tag="finetune")
    tuned.provenance = dataclasses.replace(tuned.provenance, finetuned=True)
    return tuned


def train_standard(arch, dataset, cfg, seed=0):
    """Standard training of a fresh same-architecture model."""
    cfg.validate()
    _check_dataset(dataset, cfg)
    model = StandaloneModel(arch, seed=seed)
    model.to(dtype=dataset.x.dtype)
    cfg = dataclasses.replace(cfg, seed=seed)
    return sgd_epochs(model, dataset, cfg, tag="standard")


def _train_standard_args(args):
    return train_standard(*args)


def train_surrogates(arch, dataset, cfg, seeds, nproc=1):
    """Independently seeded standard models, trained in a pool when nproc > 1."""
    assert nproc > 0
    jobs = [(arch, dataset, cfg, seed) for seed in seeds]
    if nproc > 1:
        with Pool(processes=nproc) as pool:
            return pool.map(_train_standard_args, jobs)
    return [_train_standard_args(job) for job in jobs]
