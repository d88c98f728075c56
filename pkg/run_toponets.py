#!/usr/bin/env python3
"""
TopoNets experiment runner.

    python run_toponets.py gen
    python run_toponets.py train --split 456-7
    python run_toponets.py eval --split 456-7 --task all
"""

import sys

from toponets.cli import main

if __name__ == "__main__":
    sys.exit(main())
