#!/usr/bin/env python3
"""
flowhmm - command-line entry point.
"""

import sys

from flowhmm.cli import run

if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
