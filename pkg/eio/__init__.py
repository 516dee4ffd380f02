#!/usr/bin/env python3

import os
from pathlib import Path


ARCH_DIR = Path(__file__).parent / "archs"

_env = os.environ.get("EIO_OUTPUT_ROOT")
_shm = Path("/dev/shm/eio")
if _env:
    EIO_ROOT = Path(_env)
elif _shm.exists():
    EIO_ROOT = _shm
else:
    EIO_ROOT = Path("runs")
