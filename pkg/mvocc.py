#!/usr/bin/env python3
"""
mvocc - command-line launcher

    python mvocc.py <command> [options]      (see `python mvocc.py --help`)
"""
import os
import sys

# Run from a checkout without installing: put the repo root on the import path
repo_root = os.path.dirname(os.path.abspath(__file__))
if repo_root not in sys.path:
    sys.path.insert(0, repo_root)

from mvocc.main import run_app  # noqa: E402

if __name__ == '__main__':
    sys.exit(run_app())
