#!/usr/bin/env python3

import sys

from eio.cli import main


sys.exit(main())
