# -*- coding: utf-8 -*-
"""Run tracking: per-stage wall times and per-trial optimizer statistics."""

import json
import logging
import os
import time
from collections import defaultdict
from datetime import datetime, timezone
from typing import Dict, List

logger = logging.getLogger(__name__)

METRICS_SEPARATOR = "=" * 60

MSG_INFO_METRICS_EXPORTED = "Run timings exported to {path}"
MSG_WARNING_EXPORT_FAILED = "Failed to export run timings: {error}"


class RunTracker:
    """Track stage timings and trial outcomes for one CLI run."""

    def __init__(self):
        self.start_time = time.time()
        self.stage_times = defaultdict(float)
        self.stage_status: Dict[str, str] = {}
        self.trials: List[Dict] = []

    def record_stage(self, stage: str, seconds: float, success: bool = True):
        """Record the wall time of a pipeline stage."""
        self.stage_times[stage] += seconds
        self.stage_status[stage] = "ok" if success else "failed"

    def record_trial(self, index: int, seed: int, initial_objective: float,
                     final_objective: float, iterations: int, converged: bool):
        self.trials.append({
            "index": index,
            "seed": seed,
            "initial_objective": initial_objective,
            "final_objective": final_objective,
            "iterations": iterations,
            "converged": converged,
        })

    def get_total_time(self) -> float:
        """Get total execution time in seconds."""
        return time.time() - self.start_time

    def to_dict(self) -> Dict:
        """Convert run statistics to a dictionary for JSON export."""
        iterations = [t["iterations"] for t in self.trials]
        return {
            'execution_time_seconds': round(self.get_total_time(), 2),
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'stages': {
                stage: {'seconds': round(seconds, 3), 'status': self.stage_status.get(stage, 'ok')}
                for stage, seconds in self.stage_times.items()
            },
            'trials': {
                'count': len(self.trials),
                'converged': sum(1 for t in self.trials if t["converged"]),
                'iteration_stats': {
                    'average': round(sum(iterations) / len(iterations), 2) if iterations else 0,
                    'min': min(iterations) if iterations else 0,
                    'max': max(iterations) if iterations else 0,
                },
                'details': self.trials,
            },
        }

    def export_to_json(self, file_path: str) -> bool:
        """Export run statistics to a JSON file."""
        try:
            directory = os.path.dirname(file_path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(file_path, 'w', encoding='utf-8') as f:
                json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
            logger.info(MSG_INFO_METRICS_EXPORTED.format(path=file_path))
            return True
        except Exception as e:
            logger.warning(MSG_WARNING_EXPORT_FAILED.format(error=e))
            return False

    def print_summary(self):
        """Log the stage and trial summary."""
        logger.info(f"\n{METRICS_SEPARATOR}")
        logger.info("[METRICS] Execution Summary")
        logger.info(f"{METRICS_SEPARATOR}")
        logger.info(f"Total execution time: {self.get_total_time():.2f} seconds")
        if self.stage_times:
            logger.info("\nPer-stage timings:")
            for stage, seconds in self.stage_times.items():
                logger.info(f"  {stage}: {seconds:.2f}s ({self.stage_status.get(stage, 'ok')})")
        if self.trials:
            logger.info("\nTrials:")
            for trial in self.trials:
                logger.info(
                    f"  #{trial['index']} seed {trial['seed']}: "
                    f"{trial['initial_objective']:.6g} -> {trial['final_objective']:.6g} "
                    f"({trial['iterations']} iterations, converged={trial['converged']})"
                )
        logger.info(f"{METRICS_SEPARATOR}")
