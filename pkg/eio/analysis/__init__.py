#!/usr/bin/env python3
"""
Summaries of evaluation reports and transfer matrices.
"""

import warnings

import numpy as np
import pandas as pd


REPORT_COLUMNS = ("model_id", "protocol", "eps", "accuracy", "n_samples", "seed",
        "attack_inventory_hash")


def read_reports(paths):
    """Concatenate report CSVs, skipping unreadable or malformed files."""
    frames = []
    for path in paths:
        try:
            df = pd.read_csv(path)
        except (OSError, ValueError, pd.errors.ParserError) as err:
            warnings.warn(f"Skipping unreadable report {path}: {err}")
            continue
        missing = [c for c in REPORT_COLUMNS if c not in df.columns]
        if missing:
            warnings.warn(f"Skipping report {path}: missing columns {missing}")
            continue
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=list(REPORT_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def accuracy_table(df, protocol):
    """Accuracy fractions exactly as written to the CSV, models by eps."""
    sub = df[df.protocol == protocol]
    if sub.empty:
        return sub
    return sub.pivot_table(index="model_id", columns="eps", values="accuracy",
            aggfunc="mean")


def report_table(df, protocol):
    """Accuracy in percent, rounded for printing, models by eps."""
    table = accuracy_table(df, protocol)
    if table.empty:
        return table
    return (100 * table).round(1)


def summarize_reports(df):
    for protocol in sorted(df.protocol.unique()):
        table = report_table(df, protocol)
        print(f"-- {protocol} all-or-nothing accuracy (%)")
        print(table.to_string())
        if "clean_accuracy" in df.columns:
            clean = df[df.protocol == protocol].groupby("model_id").clean_accuracy.first()
            print("-- clean accuracy (%)")
            print((100 * clean).round(1).to_string())


def summarize_transfer(matrix):
    print(f"-- Transfer success rates at eps={matrix.eps:g}")
    print(matrix.to_frame().round(3).to_string())
    print(f"-- Mean off-diagonal:   {matrix.mean_off_diagonal(): 6.3f}")


def transfer_drop(before, after):
    """Drop in mean off-diagonal transfer success, in absolute points."""
    return 100 * (before.mean_off_diagonal() - after.mean_off_diagonal())


def summarize_manifest(manifest):
    if manifest["kind"] == "rgn":
        print(f"-- RGN over {manifest['arch_name']}: scope={manifest['scope']}")
        print(f"-- Gated depth L:    {manifest['L']: 10d}")
        print(f"-- Replicas n:       {manifest['n']: 10d}")
        print(f"-- Path count:       {manifest['path_count']: 10d}")
        if manifest.get("degenerate"):
            print("NOTE: degenerate: equivalent to base network.")
    else:
        prov = manifest["provenance"]
        print(f"-- {prov['kind']} model over {manifest['arch_name']}")
        if prov.get("path"):
            print(f"-- Path:             {prov['path']}")
            print(f"-- RGN hash:         {prov['rgn_hash'][:16]}")
            print(f"-- Finetuned:        {prov['finetuned']}")


def band(values):
    values = np.asarray(values, dtype=float)
    return float(values.max() - values.min()) if values.size else 0.0
