#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Entry point for running comove as a module.
Allows execution via: python -m comove train --config configs/sample_train.json
"""

from comove import run_cli

if __name__ == "__main__":
    run_cli()
