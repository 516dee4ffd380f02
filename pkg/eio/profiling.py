#!/usr/bin/env python3

import io
import pstats
import cProfile

from eio.experiment import spec_from_config, load_split
from eio.rgn import RGNModel
from eio.seeding import RngStreams
from eio.trainer import BatchPair, make_optimizer, diversify_step


def profile_diversify_step(cfg, steps=1, print_stats=True):
    """Cumulative profile of ``steps`` diversification steps on a fresh RGN."""
    rgn = RGNModel(spec_from_config(cfg), seed=cfg.seed).to(dtype=cfg.torch_dtype)
    split = load_split(cfg)
    streams = RngStreams(cfg.seed)
    optimizer = make_optimizer(rgn, cfg.train)
    pairs = split.train.iter_batch_pairs(cfg.train.batch_size, 0, cfg.seed, limit=steps)
    batches = [BatchPair.from_batches(t, s) for t, s in pairs]
    profiler = cProfile.Profile()
    profiler.enable()
    for pair in batches:
        diversify_step(rgn, pair, cfg.train, streams, optimizer)
    profiler.disable()
    stream = io.StringIO()
    sortby = pstats.SortKey.CUMULATIVE
    stats = pstats.Stats(profiler, stream=stream).sort_stats(sortby)
    stats.print_stats(30)
    if print_stats:
        print(stream.getvalue())
    return stats
