#!/usr/bin/env python3

import copy
import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.stats import chisquare

from . import TOY_SHAPE, make_rgn, toy_batch, toy_dataset
from eio.attacks import attack
from eio.data import Dataset
from eio.distill import DistillConfig, distill_features
from eio.rgn import (Path, PathModel, InfeasiblePathError, derive_model, parameter_hash,
        sample_distinct_paths, sample_path)
from eio.seeding import RngStreams, make_stream
from eio.trainer import (AdvTConfig, BatchPair, FinetuneConfig, TrainConfig,
        TrainLog, TrainState, accumulate_gradients, cross_loss, diversify_step,
        diversify_step_advt, evaluate_accuracy, finetune, lr_for_epoch, make_optimizer, pretrain,
        sample_layer, set_lr, train, train_surrogates)


def small_config(**changes):
    cfg = TrainConfig(
            epochs=1,
            pretrain_epochs=1,
            batch_size=8,
            lr=0.05,
            lr_milestones=(),
            steps_per_epoch=2,
            progress=False,
            distill=DistillConfig(eps_d=0.07, steps=3),
    )
    return dataclasses.replace(cfg, **changes)


@pytest.fixture
def f_dataset():
    train_set, _ = toy_dataset()
    return train_set


@pytest.fixture
def f_pair():
    x_t, y_t = toy_batch(batch=8, seed=1)
    x_s, y_s = toy_batch(batch=8, seed=2)
    return BatchPair(x_t, y_t, x_s, y_s)


def distilled_for(rgn, pair, paths, l, cfg=None):
    cfg = cfg or DistillConfig(eps_d=0.07, steps=3)
    return [
            distill_features(rgn, path, l, pair.x_t, pair.x_s, cfg,
                    make_stream(0, "distill"), pair.y_s)
            for path in paths
    ]


def grads(model):
    return [None if p.grad is None else p.grad.clone() for p in model.parameters()]


class TestCrossLoss:
    def test_unrolled(self, f_pair):
        rgn = make_rgn().eval()
        paths = sample_distinct_paths(rgn, 3, 2, make_stream(0, "paths"))
        distilled = distilled_for(rgn, f_pair, paths, 2)
        losses = cross_loss(rgn, paths, distilled, f_pair.y_s)
        y = f_pair.y_s
        x1, x2 = distilled[1].x_prime, distilled[2].x_prime
        expected = (F.cross_entropy(rgn(x1, paths[0]), y)
                + F.cross_entropy(rgn(x2, paths[0]), y))
        assert len(losses) == 3
        assert torch.allclose(losses[0], expected)

    def test_symmetric(self, f_pair):
        rgn = make_rgn().eval()
        paths = sample_distinct_paths(rgn, 3, 3, make_stream(1, "paths"))
        distilled = distilled_for(rgn, f_pair, paths, 3)
        forward = cross_loss(rgn, paths, distilled, f_pair.y_s)
        backward = cross_loss(rgn, paths[::-1], distilled[::-1], f_pair.y_s)
        assert torch.allclose(torch.stack(forward), torch.stack(backward[::-1]))

    def test_provenance(self, f_pair):
        rgn = make_rgn().eval()
        paths = sample_distinct_paths(rgn, 2, 1, make_stream(0, "paths"))
        distilled = distilled_for(rgn, f_pair, paths, 1)
        with pytest.raises(ValueError):
            cross_loss(rgn, paths, distilled[::-1], f_pair.y_s)
        with pytest.raises(ValueError):
            cross_loss(rgn, paths[:1], distilled[:1], f_pair.y_s)

    def test_accumulation(self, f_pair):
        rgn = make_rgn().eval()
        paths = sample_distinct_paths(rgn, 3, 2, make_stream(2, "paths"))
        distilled = distilled_for(rgn, f_pair, paths, 2)
        rgn.zero_grad()
        accumulate_gradients(rgn, paths, distilled, f_pair.y_s)
        accumulated = grads(rgn)
        rgn.zero_grad(set_to_none=True)
        torch.stack(cross_loss(rgn, paths, distilled, f_pair.y_s)).sum().backward()
        for a, b in zip(accumulated, grads(rgn)):
            assert (a is None) == (b is None)
            if a is not None:
                assert torch.allclose(a, b, rtol=1e-5, atol=1e-12)


class TestDiversifyStep:
    def test_single_update(self, f_pair):
        rgn = make_rgn()
        cfg = small_config()
        optimizer = make_optimizer(rgn, cfg)
        calls = []
        step = optimizer.step
        optimizer.step = lambda *args, **kwargs: (calls.append(1), step(*args, **kwargs))[1]
        stats = diversify_step(rgn, f_pair, cfg, RngStreams(0), optimizer)
        assert calls == [1]
        assert stats.updates == 1
        assert len(stats.losses) == cfg.paths_per_iter
        paths = [Path.from_label(s) for s in stats.paths]
        assert all(
                a.differs_within(b, stats.layer)
                for i, a in enumerate(paths) for b in paths[i+1:])

    def test_zero_lr(self, f_pair):
        rgn = make_rgn()
        cfg = small_config()
        before = [p.detach().clone() for p in rgn.parameters()]
        optimizer = make_optimizer(rgn, cfg)
        set_lr(optimizer, 0.0)
        diversify_step(rgn, f_pair, cfg, RngStreams(0), optimizer)
        assert all(torch.equal(a, b) for a, b in zip(before, rgn.parameters()))

    def test_closed_form(self, f_pair):
        rgn = make_rgn()
        reference = copy.deepcopy(rgn)
        cfg = small_config(momentum=0.9, weight_decay=1e-3)
        optimizer = make_optimizer(rgn, cfg)
        stats = diversify_step(rgn, f_pair, cfg, RngStreams(0), optimizer)

        paths = [Path.from_label(s) for s in stats.paths]
        distilled = distilled_for(reference, f_pair, paths, stats.layer, cfg.distill)
        reference.train()
        torch.stack(cross_loss(reference, paths, distilled, f_pair.y_s)).sum().backward()
        for p0, p1 in zip(reference.parameters(), rgn.parameters()):
            if p0.grad is None:
                expected = p0
            else:
                expected = p0 - cfg.lr * (p0.grad + cfg.weight_decay * p0)
            assert torch.allclose(expected, p1, rtol=1e-6, atol=1e-10)

    def test_advt(self, f_pair):
        rgn = make_rgn()
        cfg = small_config(advt=AdvTConfig(enabled=True, eps=0.03, steps=2))
        optimizer = make_optimizer(rgn, cfg)
        stats = diversify_step_advt(rgn, f_pair, cfg, RngStreams(0), optimizer)
        assert len(stats.advt_losses) == cfg.paths_per_iter

    def test_advt_zero_eps(self, f_pair):
        rgn = make_rgn()
        spec = AdvTConfig(enabled=True, eps=0.0).attack_spec()
        model = derive_model(rgn, (0, 1, 0))
        x_adv, = attack(model, f_pair.x_s, f_pair.y_s, spec, make_stream(0, "attack"))
        assert torch.equal(x_adv, f_pair.x_s)


class TestSampleLayer:
    def test_uniform(self):
        rgn = make_rgn()
        rng = make_stream(0, "paths")
        draws = [sample_layer(rgn, 2, rng)[0] for _ in range(30_000)]
        counts = np.bincount(draws, minlength=4)[1:]
        assert counts.sum() == 30_000
        assert chisquare(counts).pvalue > 0.001

    @pytest.mark.filterwarnings("ignore:Resampled")
    def test_feasible(self):
        rgn = make_rgn()
        rng = make_stream(0, "paths")
        assert all(sample_layer(rgn, 3, rng)[0] >= 2 for _ in range(200))

    def test_infeasible(self):
        with pytest.raises(InfeasiblePathError):
            sample_layer(make_rgn(), 9, make_stream(0, "paths"))
        with pytest.raises(InfeasiblePathError):
            sample_layer(make_rgn(n=1), 2, make_stream(0, "paths"))


class TestTrain:
    def test_no_pretrain(self, f_dataset):
        rgn = make_rgn()
        before = parameter_hash(rgn)
        pretrain(rgn, f_dataset, small_config(pretrain_epochs=0))
        assert parameter_hash(rgn) == before

    def test_pretrain_only(self, f_dataset):
        cfg = small_config(epochs=0)
        a = pretrain(make_rgn(), f_dataset, cfg, RngStreams(cfg.seed))
        b, state = train(make_rgn(), f_dataset, cfg, RngStreams(cfg.seed))
        assert parameter_hash(a) == parameter_hash(b)
        assert state.phase == "done"
        assert state.updates == 0

    def test_reproducible(self, f_dataset):
        cfg = small_config()
        a, state = train(make_rgn(), f_dataset, cfg)
        b, _ = train(make_rgn(), f_dataset, cfg)
        assert parameter_hash(a) == parameter_hash(b)
        assert state.updates == cfg.epochs * cfg.steps_per_epoch

    def test_resume(self, f_dataset):
        cfg = small_config(epochs=2, steps_per_epoch=1)
        snapshot = {}

        def on_epoch(rgn, state, optimizer, streams, improved):
            if state.phase == "diversify" and state.epoch == 1:
                snapshot["model"] = copy.deepcopy(rgn.state_dict())
                snapshot["state"] = dataclasses.replace(state)
                snapshot["optimizer"] = copy.deepcopy(optimizer.state_dict())
                snapshot["streams"] = copy.deepcopy(streams.state())

        full, _ = train(make_rgn(), f_dataset, cfg, on_epoch=on_epoch)

        resumed = make_rgn()
        resumed.load_state_dict(snapshot["model"])
        resumed, state = train(
                resumed, f_dataset, cfg,
                streams=RngStreams.from_state(snapshot["streams"]),
                state=snapshot["state"],
                restore=lambda optimizer: optimizer.load_state_dict(snapshot["optimizer"]))
        assert state.phase == "done"
        assert parameter_hash(resumed) == parameter_hash(full)

    def test_log(self, f_dataset, tmp_path):
        log = TrainLog(tmp_path / "train_log.jsonl")
        train(make_rgn(), f_dataset, small_config(), log=log)
        records = TrainLog.read(log.path)
        assert len(records) == len(log.records)
        steps = log.to_frame("step")
        assert len(steps) == 2
        assert set(steps.phase) == {"diversify"}

    def test_state_roundtrip(self):
        state = TrainState(phase="diversify", epoch=3, steps=12, updates=12)
        assert TrainState.from_dict(state.to_dict()) == state

    def test_validate(self):
        with pytest.raises(ValueError):
            small_config(paths_per_iter=1).validate(3)
        with pytest.raises(ValueError):
            small_config(lr=0.0).validate(3)
        with pytest.raises(ValueError):
            small_config(distill=DistillConfig(layer=4)).validate(3)


class TestFinetune:
    def test_zero_epochs(self, f_dataset):
        model = derive_model(make_rgn(), (0, 1, 1))
        tuned = finetune(model, f_dataset, FinetuneConfig(epochs=0, progress=False))
        assert tuned is not model
        assert parameter_hash(tuned) == parameter_hash(model)
        assert not tuned.provenance.finetuned

    def test_input_untouched(self, f_dataset):
        model = derive_model(make_rgn(), (1, 0, 1))
        before = parameter_hash(model)
        cfg = FinetuneConfig(epochs=1, batch_size=8, steps_per_epoch=2, progress=False)
        tuned = finetune(model, f_dataset, cfg)
        assert parameter_hash(model) == before
        assert parameter_hash(tuned) != before
        assert tuned.provenance.finetuned
        assert tuned.provenance.path == model.provenance.path


def separable_split(count=512, seed=0):
    """Two classes of dark and bright images with small pixel noise."""
    gen = torch.Generator().manual_seed(seed)
    y = torch.randint(2, (count,), generator=gen)
    noise = 0.05 * torch.randn((count,) + TOY_SHAPE, generator=gen, dtype=torch.float64)
    x = (0.3 + 0.4 * y.view(-1, 1, 1, 1) + noise).clamp(0, 1)
    n_test = count // 4
    return (Dataset(x[n_test:], y[n_test:], 2, "separable/train"),
            Dataset(x[:n_test], y[:n_test], 2, "separable/test"))


def pretrained_on_separable(seed):
    train_set, test_set = separable_split(seed=seed)
    cfg = small_config(pretrain_epochs=5, epochs=0, batch_size=16, steps_per_epoch=None,
            seed=seed)
    rgn = pretrain(make_rgn(seed=seed), train_set, cfg)
    return rgn, train_set, test_set


class TestSeparable:
    def test_pretrain_every_path(self):
        rgn, _, test_set = pretrained_on_separable(seed=0)
        rng = make_stream(0, "paths/eval")
        for _ in range(10):
            path = sample_path(rgn, rng)
            accuracy = evaluate_accuracy(PathModel(rgn, path), test_set.x, test_set.y)
            assert accuracy > 0.9, path.label

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finetune_keeps_accuracy(self, seed):
        rgn, train_set, test_set = pretrained_on_separable(seed)
        model = derive_model(rgn, sample_path(rgn, make_stream(seed, "paths/derive")))
        before = evaluate_accuracy(model, test_set.x, test_set.y)
        cfg = FinetuneConfig(epochs=2, batch_size=16, lr_milestones=(), progress=False,
                seed=seed)
        tuned = finetune(model, train_set, cfg)
        after = evaluate_accuracy(tuned, test_set.x, test_set.y)
        assert after >= before - 0.005


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_for_epoch(0, cfg) == pytest.approx(0.1)
    assert lr_for_epoch(99, cfg) == pytest.approx(0.1)
    assert lr_for_epoch(100, cfg) == pytest.approx(0.01)
    assert lr_for_epoch(150, cfg) == pytest.approx(0.001)


def test_surrogates_differ(f_dataset):
    rgn = make_rgn()
    cfg = FinetuneConfig(epochs=1, batch_size=8, steps_per_epoch=1, progress=False)
    models = train_surrogates(rgn.arch, f_dataset, cfg, seeds=[1, 2])
    assert len(models) == 2
    assert parameter_hash(models[0]) != parameter_hash(models[1])
    assert [m.provenance.seed for m in models] == [1, 2]
