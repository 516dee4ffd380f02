#!/usr/bin/env python3
"""
Hyper-parameter studies: the number of paths per iteration, the
distillation radius, the augmentation factor and the augmentation scope are
swept one grid at a time, each variant in its own output directory.
"""

import re
import copy
import logging
import itertools

import pandas as pd

from eio.config import ConfigParser, ConfigError


logger = logging.getLogger(__name__)

SWEEP_ALIASES = {
        "p": "train.paths_per_iter",
        "eps_d": "train.distill.eps_d",
        "n": "n",
        "scope": "scope",
}


class GridParser:
    p_axis = re.compile(R"^(?P<key>[A-Za-z_][\w\.]*)=(?P<values>[^=]+)$")

    @classmethod
    def parse(cls, texts):
        """``["p=2,3,4", "eps_d=0.03,0.07"]`` to an ordered ``{key: values}``."""
        grid = {}
        for text in texts:
            m = cls.p_axis.match(text.strip())
            if m is None:
                raise ConfigError(f"Sweep axis must be key=v1,v2,...: {text!r}")
            key = SWEEP_ALIASES.get(m["key"], m["key"])
            values = [v.strip() for v in m["values"].split(";" if key == "scope" else ",")]
            grid[key] = [v for v in values if v]
        return grid


def variant_label(assignment):
    parts = []
    for key, value in assignment:
        short = key.split(".")[-1]
        value = re.sub(R"[^\w\.]+", "_", value)
        parts.append(f"{short}-{value}")
    return "_".join(parts)


def expand_sweep(cfg, grid):
    """Cartesian product of the grid; returns ``[(label, cfg), ...]``."""
    keys = list(grid)
    variants = []
    for values in itertools.product(*(grid[k] for k in keys)):
        assignment = list(zip(keys, values))
        variant = copy.deepcopy(cfg)
        parser = ConfigParser(variant)
        for key, value in assignment:
            parser.set(key, value)
        label = variant_label(assignment)
        variant.output_dir = f"{cfg.output_dir}/sweep/{label}"
        variants.append((label, variant))
    return variants


def run_sweep(cfg, grid, runner):
    """
    Run ``runner(variant_cfg)`` for every variant; ``runner`` returns a
    report frame. Results are concatenated with a ``variant`` column.
    """
    frames = []
    for label, variant in expand_sweep(cfg, grid):
        logger.info(f"Sweep variant {label}")
        df = runner(variant)
        if df is None or df.empty:
            continue
        df = df.copy()
        df.insert(0, "variant", label)
        frames.append(df)
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


def summarize_sweep(df, protocol="blackbox", eps=0.03):
    sub = df[(df.protocol == protocol) & (df.eps.round(6) == round(eps, 6))]
    table = sub.pivot_table(index="variant", columns="model_id", values="accuracy")
    print(f"-- {protocol} accuracy (%) at eps={eps:g} per variant")
    print((100 * table).round(1).to_string())
