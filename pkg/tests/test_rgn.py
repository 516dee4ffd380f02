#!/usr/bin/env python3

from collections import Counter

import numpy as np
import pytest
import torch
from scipy.stats import chisquare
from hypothesis import given, settings, strategies as st

from . import TOY_ARCH, RESIDUAL_ARCH, make_rgn, toy_batch
from eio.archspec import parse_arch
from eio.rgn import (Path, InfeasiblePathError, StandaloneModel, PathModel,
        top_l_distinct, sample_gate, sample_path, sample_distinct_paths,
        count_paths, iter_paths, derive_model, random_gated_inference,
        parameter_hash, forward)
from eio.seeding import RngStreams, make_stream


@pytest.fixture
def f_rgn():
    return make_rgn().eval()


@pytest.fixture
def f_batch():
    return toy_batch()


class TestSampling:
    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_gate_uniform(self, n):
        rng = make_stream(0, f"gates/{n}")
        draws = [sample_gate(n, rng) for _ in range(100_000)]
        counts = np.bincount(draws, minlength=n)
        assert counts.size == n
        assert chisquare(counts).pvalue > 0.01

    def test_gate_bad_n(self):
        with pytest.raises(ValueError):
            sample_gate(0, make_stream(0, "x"))

    def test_path(self, f_rgn):
        path = sample_path(f_rgn, make_stream(0, "paths"))
        assert len(path) == f_rgn.L
        assert all(0 <= g < f_rgn.n for g in path)

    def test_path_frequencies(self, f_rgn):
        rng = make_stream(0, "paths/frequency")
        drawn = Counter(sample_path(f_rgn, rng).label for _ in range(80_000))
        expected = [path.label for path in iter_paths(f_rgn)]
        counts = np.array([drawn[label] for label in expected])
        assert len(expected) == 8
        assert counts.sum() == 80_000
        assert chisquare(counts).pvalue > 0.01
        assert np.all(np.abs(counts / 80_000 - 1 / 8) < 0.005)

    def test_distinct(self, f_rgn):
        rng = make_stream(0, "paths")
        for _ in range(10_000):
            l = int(rng.integers(2, f_rgn.L + 1))
            paths = sample_distinct_paths(f_rgn, 3, l, rng)
            assert len(paths) == 3
            assert top_l_distinct(paths, l)

    def test_distinct_assignment(self, f_rgn):
        rng = make_stream(0, "paths")
        paths = sample_distinct_paths(f_rgn, 4, 2, rng, max_retries=0)
        assert top_l_distinct(paths, 2)

    def test_infeasible(self, f_rgn):
        rng = make_stream(0, "paths")
        with pytest.raises(InfeasiblePathError):
            sample_distinct_paths(f_rgn, 3, 1, rng)
        with pytest.raises(ValueError):
            sample_distinct_paths(f_rgn, 1, 2, rng)
        with pytest.raises(ValueError):
            sample_distinct_paths(f_rgn, 2, 4, rng)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=3))
    def test_count_paths(self, n, k):
        rgn = make_rgn(n=n, scope=("top_k", k))
        paths = list(iter_paths(rgn))
        assert len(paths) == count_paths(rgn) == n ** k
        assert len(set(paths)) == len(paths)


class TestForward:
    def test_path_required(self, f_rgn, f_batch):
        x, _ = f_batch
        with pytest.raises(ValueError):
            f_rgn(x)
        with pytest.raises(ValueError):
            f_rgn(x, (0, 1))
        with pytest.raises(ValueError):
            f_rgn(x, (0, 1, 2))

    def test_bad_input(self, f_rgn):
        with pytest.raises(ValueError):
            f_rgn(torch.zeros(2, 3, 4, 4, dtype=torch.float64), (0, 0, 0))

    def test_tap(self, f_rgn, f_batch):
        x, _ = f_batch
        logits, feat = forward(f_rgn, (0, 1, 0), x, tap_layer=2)
        assert logits.shape == (4, 3)
        assert feat.shape == (4, 4, 8, 8)
        assert (feat >= 0).all()
        with pytest.raises(ValueError):
            f_rgn(x, (0, 1, 0), tap_layer=4)

    def test_replica_count(self, f_rgn, f_batch):
        x, _ = f_batch
        f_rgn.reset_counters()
        f_rgn(x, (1, 0, 1))
        assert f_rgn.replica_forwards == f_rgn.L

    def test_paths_differ(self, f_rgn, f_batch):
        x, _ = f_batch
        a = f_rgn(x, (0, 0, 0))
        b = f_rgn(x, (1, 1, 1))
        assert not torch.allclose(a, b)

    def test_degenerate(self, f_batch):
        x, _ = f_batch
        arch = parse_arch(TOY_ARCH, name="toy")
        base = StandaloneModel(arch, seed=3).to(dtype=torch.float64).eval()
        rgn = make_rgn(n=1).load_base_parameters(base).eval()
        diff = (rgn(x) - base(x)).abs().max()
        assert diff <= 1e-5
        assert count_paths(rgn) == 1

    def test_random_gated_inference(self, f_rgn, f_batch):
        x, _ = f_batch
        a = random_gated_inference(f_rgn, x, make_stream(0, "eval"))
        b = random_gated_inference(f_rgn, x, make_stream(0, "eval"))
        assert torch.equal(a, b)
        c = random_gated_inference(f_rgn, x, make_stream(0, "eval"), per_sample=True)
        assert c.shape == a.shape

    def test_skip_gradient(self, f_batch):
        x, y = f_batch
        rgn = make_rgn(RESIDUAL_ARCH).eval()
        path = (0, 1, 0)

        def input_grad(gamma=None):
            z = x.clone().requires_grad_(True)
            if gamma is None:
                out = rgn(z, path)
            else:
                with rgn.skip_gradient(gamma):
                    out = rgn(z, path)
            torch.nn.functional.cross_entropy(out, y).backward()
            return out.detach(), z.grad

        out_a, grad_a = input_grad()
        out_b, grad_b = input_grad(0.2)
        assert torch.allclose(out_a, out_b)
        assert not torch.allclose(grad_a, grad_b)
        assert rgn.has_skip_connections


class TestDerive:
    def test_fidelity(self, f_rgn):
        x, _ = toy_batch(batch=256, seed=11)
        path = Path((1, 0, 1))
        model = derive_model(f_rgn, path)
        with torch.no_grad():
            assert (model(x) - f_rgn(x, path)).abs().max() <= 1e-6
        assert model.provenance.path == path
        assert model.provenance.rgn_hash == parameter_hash(f_rgn)
        assert not model.training

    def test_independent(self, f_rgn, f_batch):
        x, _ = f_batch
        path = (0, 1, 1)
        before = f_rgn(x, path)
        model = derive_model(f_rgn, path)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(1.0)
        assert torch.equal(before, f_rgn(x, path))

    def test_path_model(self, f_rgn, f_batch):
        x, _ = f_batch
        view = PathModel(f_rgn, (1, 1, 0))
        assert torch.equal(view(x), f_rgn(x, (1, 1, 0)))


def test_path_label():
    path = Path((0, 1, 1))
    assert path.label == "0-1-1"
    assert Path.from_label("0-1-1") == path
    assert path.differs_within(Path((0, 0, 1)), 2)
    assert not path.differs_within(Path((0, 1, 0)), 2)


def test_parameter_hash():
    assert parameter_hash(make_rgn(seed=1)) == parameter_hash(make_rgn(seed=1))
    assert parameter_hash(make_rgn(seed=1)) != parameter_hash(make_rgn(seed=2))


def test_streams_state():
    streams = RngStreams(7)
    streams["paths"].integers(100, size=5)
    state = streams.state()
    expected = streams["paths"].integers(100, size=5)
    restored = RngStreams.from_state(state)
    assert np.array_equal(restored["paths"].integers(100, size=5), expected)
    assert not np.array_equal(
            make_stream(7, "paths").integers(1 << 30, size=4),
            make_stream(7, "distill").integers(1 << 30, size=4))
