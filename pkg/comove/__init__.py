#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Toolkit for jointly modelling coupled financial time series with multi-output
Gaussian processes built on spectral mixture kernels.

Features:
- CSV ingestion, log/detrend transforms and imputation masks
- MOSM kernel plus the CSM, SM-LMC and SM-IGP restrictions
- MAP training with L-BFGS-B over multiple perturbed trials
- Posterior imputation, cross-correlation matrices and nMAE/nRMSE reports
- Command-line runner with synthetic data and SVG plots
"""

import sys
import logging

__version__ = "0.3.0"

# Fix encoding for Windows console
if sys.platform == 'win32':
    sys.stdout.reconfigure(encoding='utf-8')

# ============================================================================
# LOGGING SETUP
# ============================================================================

def setup_logging():
    """Configure logging with appropriate format and level."""
    logging.basicConfig(
        level=logging.INFO,
        format='[%(levelname)s] %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)]
    )
    return logging.getLogger(__name__)

logger = setup_logging()

from comove.errors import ComoveError  # noqa: E402
from comove.cli import main, run_cli  # noqa: E402

__all__ = ["ComoveError", "main", "run_cli", "logger", "__version__"]

if __name__ == "__main__":
    run_cli()
