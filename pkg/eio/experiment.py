#!/usr/bin/env python3
"""
Run orchestration: build, train, derive, fine-tune, train surrogates and
evaluate, with every artifact written under the run's output directory.
"""

import logging
import warnings
from pathlib import Path

import pandas as pd

from eio import analysis
from eio.analysis import plots
from eio.analysis.stability import stability_check
from eio.archspec import read_arch, make_scope, build_rgn_spec
from eio.attacks import (AttackSpec, AdversarialCache, Ensemble, ProtocolError,
        SurrogateSet, blackbox_protocol, whitebox_protocol, transfer_matrix)
from eio.checkpoint import (CheckpointError, save_rgn, load_rgn, save_standalone,
        load_standalone, load_model, restore_optimizer)
from eio.config import dump_config, config_hash
from eio.data import ingest_dataset
from eio.rgn import (RGNModel, InfeasiblePathError, count_paths, derive_model,
        sample_path, sample_distinct_paths)
from eio.seeding import RngStreams, make_stream
from eio.trainer import (TrainLog, TrainState, train, finetune, train_standard,
        train_surrogates)


logger = logging.getLogger(__name__)

PHASE_ORDER = {"pretrain": 0, "diversify": 1, "done": 2}


class RunDirectory:
    """File layout of one run."""
    def __init__(self, root):
        self.root = Path(root)

    @property
    def config(self):
        return self.root / "config.cfg"

    @property
    def built(self):
        return self.root / "rgn" / "built.npz"

    @property
    def pretrained(self):
        return self.root / "rgn" / "pretrained.npz"

    @property
    def last(self):
        return self.root / "rgn" / "last.npz"

    @property
    def best(self):
        return self.root / "rgn" / "best.npz"

    @property
    def trained(self):
        return self.root / "rgn" / "trained.npz"

    @property
    def train_log(self):
        return self.root / "train_log.jsonl"

    @property
    def derived_dir(self):
        return self.root / "derived"

    def derived(self, path, finetuned=False):
        suffix = "-ft" if finetuned else ""
        return self.derived_dir / f"path-{path.label}{suffix}.npz"

    @property
    def surrogate_dir(self):
        return self.root / "surrogates"

    def surrogate(self, k):
        return self.surrogate_dir / f"surrogate-{k}.npz"

    @property
    def baseline(self):
        return self.root / "baseline" / "standard.npz"

    @property
    def reports(self):
        return self.root / "reports"

    @property
    def cache(self):
        return self.root / "cache"

    def surrogate_paths(self):
        return sorted(self.surrogate_dir.glob("surrogate-*.npz"))


def _write_config(cfg, dirs):
    dirs.root.mkdir(parents=True, exist_ok=True)
    dirs.config.write_text(dump_config(cfg), encoding="ascii")


def spec_from_config(cfg):
    arch = read_arch(cfg.arch)
    scope = make_scope(arch, cfg.scope)
    return build_rgn_spec(arch, scope, cfg.n)


def load_split(cfg):
    split = ingest_dataset(cfg.data)
    split.train = split.train.to(dtype=cfg.torch_dtype)
    split.test = split.test.to(dtype=cfg.torch_dtype)
    return split


def run_build(cfg):
    """Initialize the RGN and write the built checkpoint; returns its manifest."""
    cfg.validate()
    dirs = RunDirectory(cfg.output_path)
    _write_config(cfg, dirs)
    spec = spec_from_config(cfg)
    rgn = RGNModel(spec, seed=cfg.seed).to(dtype=cfg.torch_dtype)
    manifest = save_rgn(
            rgn, dirs.built,
            seed=cfg.seed,
            rng_state=RngStreams(cfg.seed).state(),
            counters=TrainState().to_dict(),
            config_hash=config_hash(cfg),
    )
    logger.info(f"Built RGN: L={spec.L} n={spec.n} paths={count_paths(spec)}")
    return manifest


def _trim_log(path, state):
    """Drop records written after the checkpoint a run resumes from."""
    if not path.exists():
        return
    rank = PHASE_ORDER[state.phase]
    kept = [
            r for r in TrainLog.read(path)
            if PHASE_ORDER[r["phase"]] < rank
            or (PHASE_ORDER[r["phase"]] == rank and r["epoch"] < state.epoch)
    ]
    path.unlink()
    log = TrainLog(path)
    for record in kept:
        log.append(**record)


def run_train(cfg, resume=False):
    """
    Pretrain and diversify the built RGN. With ``resume`` the run continues
    from the last epoch checkpoint, including optimizer and RNG state.
    """
    cfg.validate()
    dirs = RunDirectory(cfg.output_path)
    spec = spec_from_config(cfg)
    cfg_hash = config_hash(cfg)
    resuming = resume and dirs.last.exists()
    source = dirs.last if resuming else dirs.built
    if not source.exists():
        raise CheckpointError(f"No built checkpoint at {source}; run build first")
    rgn, ckpt = load_rgn(source, expected_spec_hash=spec.digest())
    rgn.to(dtype=cfg.torch_dtype)
    if resuming:
        state = TrainState.from_dict(ckpt.counters)
        streams = RngStreams.from_state(ckpt.rng_state)
        restore = lambda optimizer: restore_optimizer(optimizer, ckpt)
        _trim_log(dirs.train_log, state)
        logger.info(f"Resuming at {state.phase} epoch {state.epoch}")
    else:
        state = TrainState()
        streams = RngStreams(cfg.seed)
        restore = None
        if dirs.train_log.exists():
            dirs.train_log.unlink()
    if state.phase == "done":
        logger.info("Training already complete")
        return rgn, state
    split = load_split(cfg)
    eval_data = split.test.sample(min(cfg.eval.n_samples, len(split.test)), cfg.seed)
    log = TrainLog(dirs.train_log)
    if cfg.train.pretrain_epochs == 0 and state.phase == "pretrain":
        save_rgn(rgn, dirs.pretrained, seed=cfg.seed, config_hash=cfg_hash)

    def on_epoch(rgn, state, optimizer, streams, improved):
        save_rgn(rgn, dirs.last, seed=cfg.seed, rng_state=streams.state(),
                counters=state.to_dict(), optimizer=optimizer, config_hash=cfg_hash)
        if state.phase == "pretrain" and state.epoch == cfg.train.pretrain_epochs:
            save_rgn(rgn, dirs.pretrained, seed=cfg.seed, config_hash=cfg_hash)
        if improved:
            save_rgn(rgn, dirs.best, seed=cfg.seed, counters=state.to_dict(),
                    config_hash=cfg_hash, extra={"accuracy": state.best_accuracy})

    rgn, state = train(rgn, split.train, cfg.train, streams=streams, log=log,
            state=state, restore=restore, on_epoch=on_epoch, eval_data=eval_data)
    save_rgn(rgn, dirs.trained, seed=cfg.seed, rng_state=streams.state(),
            counters=state.to_dict(), config_hash=cfg_hash)
    return rgn, state


def sample_unique_paths(rgn, count, rng):
    if count > count_paths(rgn.spec):
        raise InfeasiblePathError(
                f"Cannot derive {count} distinct paths from {count_paths(rgn.spec)}")
    if count == 1:
        return [sample_path(rgn, rng)]
    return sample_distinct_paths(rgn, count, rgn.L, rng)


def derive_paths(rgn, count, seed, tag="derive"):
    """``count`` distinct paths and their standalone models."""
    rng = make_stream(seed, tag)
    paths = sample_unique_paths(rgn, count, rng)
    return paths, [derive_model(rgn, path) for path in paths]


def run_derive(cfg, count=None, do_finetune=None, checkpoint=None):
    """Derive distinct paths, optionally fine-tune them; returns written files."""
    dirs = RunDirectory(cfg.output_path)
    count = cfg.derive.count if count is None else count
    do_finetune = cfg.derive.finetune if do_finetune is None else do_finetune
    source = Path(checkpoint) if checkpoint is not None else dirs.trained
    rgn, _ = load_rgn(source)
    paths, models = derive_paths(rgn, count, cfg.seed)
    split = load_split(cfg) if do_finetune else None
    written = []
    for path, model in zip(paths, models):
        target = dirs.derived(path)
        save_standalone(model, target, config_hash=config_hash(cfg))
        written.append(target)
        if do_finetune:
            tuned = finetune(model, split.train, cfg.finetune)
            target = dirs.derived(path, finetuned=True)
            save_standalone(tuned, target, config_hash=config_hash(cfg))
            written.append(target)
        logger.info(f"Derived path {path.label}")
    return written


def run_finetune(cfg, model_paths):
    split = load_split(cfg)
    written = []
    for model_path in model_paths:
        model, _ = load_standalone(model_path)
        tuned = finetune(model, split.train, cfg.finetune)
        target = Path(model_path).with_name(Path(model_path).stem + "-ft.npz")
        save_standalone(tuned, target, config_hash=config_hash(cfg))
        written.append(target)
    return written


def surrogate_seeds(cfg, count):
    return [int(make_stream(cfg.seed, f"surrogate/{k}").integers(2**31)) for k in range(count)]


def run_surrogates(cfg, count=None, baseline=False):
    """Standard-train independent surrogates (and optionally a baseline)."""
    cfg.validate()
    dirs = RunDirectory(cfg.output_path)
    count = cfg.surrogates.count if count is None else count
    arch = read_arch(cfg.surrogates.arch or cfg.arch)
    split = load_split(cfg)
    models = train_surrogates(arch, split.train, cfg.surrogates,
            surrogate_seeds(cfg, count), nproc=cfg.surrogates.nproc)
    written = []
    for k, model in enumerate(models):
        save_standalone(model, dirs.surrogate(k), config_hash=config_hash(cfg))
        written.append(dirs.surrogate(k))
    if baseline:
        seed = int(make_stream(cfg.seed, "baseline").integers(2**31))
        model = train_standard(read_arch(cfg.arch), split.train, cfg.surrogates, seed)
        save_standalone(model, dirs.baseline, config_hash=config_hash(cfg))
        written.append(dirs.baseline)
    return written


def load_surrogates(paths):
    if not paths:
        raise ProtocolError("Black-box evaluation needs surrogates; run surrogates first")
    ids = [Path(p).stem for p in paths]
    return SurrogateSet([load_standalone(p)[0] for p in paths], ids)


def _model_id(path):
    return Path(path).stem


def _write_reports(reports, dirs, plot=True):
    dirs.reports.mkdir(parents=True, exist_ok=True)
    frames = []
    for report in reports:
        report.to_csv(dirs.reports / f"{report.model_id}-{report.protocol}.csv")
        report.to_jsonl(dirs.reports / "reports.jsonl")
        frames.append(report.to_frame())
    df = pd.concat(frames, ignore_index=True)
    if plot:
        for protocol in df.protocol.unique():
            plots.plot_accuracy_vs_eps(df, protocol, dirs.reports / f"{protocol}.png")
    return df


def transfer_spec(cfg, eps):
    bb = cfg.blackbox
    return AttackSpec(method="pgd", loss="cross_entropy", eps=eps, steps=bb.steps,
            step_size=eps * bb.step_ratio, momentum=bb.momentum)


def run_transfer(cfg, models, model_ids, tag="transfer"):
    """Transfer matrix among models at ``eval.transfer_eps``; CSV and figure."""
    dirs = RunDirectory(cfg.output_path)
    split = load_split(cfg)
    samples = split.test.sample(cfg.eval.n_samples, cfg.seed)
    eps = cfg.eval.transfer_eps
    matrix = transfer_matrix(models, transfer_spec(cfg, eps), samples,
            make_stream(cfg.seed, f"attack/{tag}"), model_ids, cfg.blackbox.batch_size,
            config_hash=config_hash(cfg), seed=cfg.seed)
    dirs.reports.mkdir(parents=True, exist_ok=True)
    matrix.to_csv(dirs.reports / f"{tag}-eps{eps:g}.csv")
    if cfg.eval.plots:
        plots.plot_transfer_matrix(matrix, dirs.reports / f"{tag}-eps{eps:g}.png")
    return matrix


def run_rgn_transfer(cfg, checkpoint, count=3, tag="transfer-rgn"):
    """Transfer matrix among ``count`` paths derived from an RGN checkpoint."""
    rgn, _ = load_rgn(checkpoint)
    rgn.to(dtype=cfg.torch_dtype)
    paths, models = derive_paths(rgn, count, cfg.seed, tag="derive/transfer")
    return run_transfer(cfg, models, [p.label for p in paths], tag=tag)


def run_eval(cfg, model_paths, protocols=None, surrogate_paths=None, ensemble=False,
             eps_grid=None):
    """Evaluate models under the configured protocols; returns the report frame."""
    dirs = RunDirectory(cfg.output_path)
    protocols = tuple(protocols or cfg.eval.protocols)
    eps_grid = tuple(eps_grid or cfg.eval.eps_grid)
    cfg_hash = config_hash(cfg)
    models = [load_model(p).to(dtype=cfg.torch_dtype) for p in model_paths]
    ids = [_model_id(p) for p in model_paths]
    if not models:
        raise ProtocolError("No models to evaluate")
    if ensemble:
        rule = cfg.eval.ensemble_rule
        models = [Ensemble(models, rule)]
        ids = [f"ensemble{len(ids)}-{rule}"]
    split = load_split(cfg)
    samples = split.test.sample(cfg.eval.n_samples, cfg.seed)
    reports = []
    if "blackbox" in protocols:
        if surrogate_paths is None:
            surrogate_paths = dirs.surrogate_paths()
        surrogates = load_surrogates(surrogate_paths)
        for surrogate in surrogates.models:
            surrogate.to(dtype=cfg.torch_dtype)
        cache = None
        if cfg.eval.cache:
            cache = AdversarialCache(
                    dirs.cache / f"blackbox-n{len(samples[1])}-s{cfg.seed}.npz")
        for model_id, model in zip(ids, models):
            reports.append(blackbox_protocol(
                    model, surrogates, eps_grid, samples,
                    make_stream(cfg.seed, "attack/blackbox"), cfg.blackbox,
                    model_id=model_id, cache=cache, config_hash=cfg_hash, seed=cfg.seed))
    if "whitebox" in protocols:
        for model_id, model in zip(ids, models):
            reports.append(whitebox_protocol(
                    model, eps_grid, samples,
                    make_stream(cfg.seed, f"attack/whitebox/{model_id}"), cfg.whitebox,
                    model_id=model_id, config_hash=cfg_hash, seed=cfg.seed))
    if "transfer" in protocols and not ensemble and len(models) > 1:
        run_transfer(cfg, models, ids)
    if not reports:
        return pd.DataFrame()
    df = _write_reports(reports, dirs, plot=cfg.eval.plots)
    analysis.summarize_reports(df)
    return df


def run_report(report_dir):
    """Collect every report CSV under ``report_dir`` and print the tables."""
    paths = sorted(
            p for p in Path(report_dir).glob("*.csv")
            if not p.name.startswith("transfer")
    )
    df = analysis.read_reports(paths)
    if df.empty:
        warnings.warn(f"No readable reports in {report_dir}")
        return df
    analysis.summarize_reports(df)
    return df


def run_pipeline(cfg, resume=False):
    """Build, surrogates, train, derive (+finetune), then evaluate."""
    dirs = RunDirectory(cfg.output_path)
    if not (resume and dirs.built.exists()):
        run_build(cfg)
    if not (resume and dirs.surrogate_paths()):
        run_surrogates(cfg, baseline=True)
    run_train(cfg, resume=resume)
    before = run_rgn_transfer(cfg, dirs.pretrained, tag="transfer-pretrained")
    after = run_rgn_transfer(cfg, dirs.trained, tag="transfer-trained")
    analysis.summarize_transfer(before)
    analysis.summarize_transfer(after)
    logger.info(f"Transfer drop: {analysis.transfer_drop(before, after):.1f} points")
    derived = run_derive(cfg)
    finetuned = [p for p in derived if p.stem.endswith("-ft")]
    targets = finetuned or derived
    if dirs.baseline.exists():
        targets = targets + [dirs.baseline]
    return run_eval(cfg, targets)


def run_stability(cfg, count=8, checkpoint=None):
    """Clean and black-box accuracy spread over ``count`` derived paths."""
    dirs = RunDirectory(cfg.output_path)
    rgn, _ = load_rgn(checkpoint or dirs.trained)
    rgn.to(dtype=cfg.torch_dtype)
    paths, models = derive_paths(rgn, count, cfg.seed, tag="derive/stability")
    split = load_split(cfg)
    samples = split.test.sample(cfg.eval.n_samples, cfg.seed)
    surrogates = load_surrogates(dirs.surrogate_paths())
    cache = AdversarialCache(dirs.cache / f"blackbox-n{len(samples[1])}-s{cfg.seed}.npz")
    eps = cfg.eval.transfer_eps
    clean, robust = [], []
    for path, model in zip(paths, models):
        report = blackbox_protocol(model, surrogates, (eps,), samples,
                make_stream(cfg.seed, "attack/blackbox"), cfg.blackbox,
                model_id=path.label, cache=cache, config_hash=config_hash(cfg),
                seed=cfg.seed)
        clean.append(report.records[0].clean_accuracy)
        robust.append(report.records[0].accuracy)
    result = stability_check([p.label for p in paths], clean, robust)
    result.summarize()
    return result
