#!/usr/bin/env python3
"""
Stability of paths derived from one RGN: the spread of clean and robust
accuracy across derived models should stay within fixed bands (in points).

Stability flags:
 I.   clean and robust spread within their bands
 II.  only the clean spread exceeds its band
 III. only the robust spread exceeds its band
 IV.  both exceed
"""

from enum import Enum
from dataclasses import dataclass

import numpy as np

from eio.analysis import band


CLEAN_BAND = 2.0
ROBUST_BAND = 4.0


class StabilityFlag(Enum):
    OKAY   = 1
    CLEAN  = 2
    ROBUST = 3
    FAIL   = 4


BAD_STABILITY_FLAGS = (StabilityFlag.CLEAN, StabilityFlag.ROBUST, StabilityFlag.FAIL)


def stability_flag_from_spreads(clean_spread, robust_spread,
        clean_band=CLEAN_BAND, robust_band=ROBUST_BAND):
    clean_ok = clean_spread <= clean_band
    robust_ok = robust_spread <= robust_band
    if clean_ok and robust_ok:
        return StabilityFlag.OKAY
    elif robust_ok:
        return StabilityFlag.CLEAN
    elif clean_ok:
        return StabilityFlag.ROBUST
    else:
        return StabilityFlag.FAIL


@dataclass
class StabilityResult:
    model_ids : list
    clean : np.ndarray
    robust : np.ndarray
    flag : StabilityFlag

    @property
    def clean_spread(self):
        return band(100 * self.clean)

    @property
    def robust_spread(self):
        return band(100 * self.robust)

    def summarize(self):
        print(f"-- Derived models:      {len(self.model_ids): 6d}")
        print(f"-- Clean spread (pt):   {self.clean_spread: 6.2f}")
        print(f"-- Robust spread (pt):  {self.robust_spread: 6.2f}")
        print(f"-- Flag:                {self.flag.name}")


def stability_check(model_ids, clean, robust, clean_band=CLEAN_BAND,
        robust_band=ROBUST_BAND):
    """
    Flag a set of derived models by the spread of their accuracies, given as
    fractions in ``[0, 1]``; bands are in percentage points.
    """
    clean = np.asarray(clean, dtype=float)
    robust = np.asarray(robust, dtype=float)
    if not len(model_ids) == clean.size == robust.size:
        raise ValueError("Model ids and accuracies differ in length")
    flag = stability_flag_from_spreads(
            band(100 * clean), band(100 * robust), clean_band, robust_band)
    return StabilityResult(list(model_ids), clean, robust, flag)


def stability_from_reports(df, eps=0.03, protocol="blackbox", **bands):
    """Stability of every model in a report frame at one eps."""
    sub = df[(df.protocol == protocol) & np.isclose(df.eps, eps)]
    sub = sub.groupby("model_id").first()
    return stability_check(list(sub.index), sub.clean_accuracy.values,
            sub.accuracy.values, **bands)
