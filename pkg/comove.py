#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Wrapper script for the comove package.
Allows execution via: python comove.py <subcommand> [options]
Also supports: python -m comove
"""

from comove import run_cli

if __name__ == "__main__":
    run_cli()
