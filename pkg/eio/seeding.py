#!/usr/bin/env python3
"""
Named random streams. Each concern (initialization, path sampling,
distillation, attacks, data order, evaluation) draws from its own stream so
that changing how often one concern draws never shifts another.
"""

import zlib

import numpy as np


STREAMS = ("init", "paths", "distill", "attack", "data", "eval")


def make_stream(seed, name):
    key = zlib.crc32(name.encode("ascii"))
    seq = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.default_rng(seq)


def torch_seed(rng):
    """Draw a seed for ``torch.manual_seed`` from a numpy stream."""
    return int(rng.integers(2**62))


class RngStreams:
    def __init__(self, seed, names=STREAMS):
        self.seed = int(seed)
        self._streams = {name: make_stream(self.seed, name) for name in names}

    def __getitem__(self, name):
        if name not in self._streams:
            self._streams[name] = make_stream(self.seed, name)
        return self._streams[name]

    def __iter__(self):
        return iter(self._streams)

    def derive(self, name, index):
        """Independent stream owned by worker ``index`` of a concern."""
        return make_stream(self.seed, f"{name}/{index}")

    def state(self):
        return {
                "seed": self.seed,
                "streams": {
                    name: rng.bit_generator.state
                    for name, rng in self._streams.items()
                },
        }

    @classmethod
    def from_state(cls, state):
        streams = cls(state["seed"], names=())
        for name, bg_state in state["streams"].items():
            rng = streams[name]
            rng.bit_generator.state = bg_state
        return streams
