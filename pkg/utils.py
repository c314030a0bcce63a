import csv
import hashlib
import json
import logging
import os
import uuid
from datetime import datetime
from functools import wraps
from typing import Any, Callable, Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)

SYSTEM_LOG_DIR = "system_log"


def run_log_path(run_id: str) -> str:
    return os.path.join(SYSTEM_LOG_DIR, f"run_{run_id}.csv")


def log_to_run_file(run_id: Optional[str], status: str, message: str) -> None:
    """Log message to run-specific CSV file without console output.

    Args:
        run_id: The run ID. Nothing is written when it is empty.
        status: The current status.
        message: The message to log.
    """
    if not run_id:
        return

    log_file = run_log_path(run_id)
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")

    try:
        with open(log_file, 'a', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow([timestamp, status, message])
    except Exception as e:
        # Only log errors to console, not the actual messages
        logger.error(f"Error writing to run log file: {str(e)}")


def new_run_id() -> str:
    """Initialize a new run with a unique ID and an empty run log."""
    run_id = f"{datetime.now().strftime('%Y%m%d')}_{uuid.uuid4().hex[:8]}"

    try:
        os.makedirs(SYSTEM_LOG_DIR, exist_ok=True)
        with open(run_log_path(run_id), 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(["Timestamp", "Status", "Message"])
    except Exception as e:
        logger.error(f"Error creating run log file: {str(e)}")
    return run_id


def retry_until_converged(
    max_attempts: int = 3,
    converged: Callable[[Any], bool] = lambda result: getattr(result, 'converged', True),
    score: Callable[[Any], float] = lambda result: getattr(result, 'objective', 0.0),
):
    """Decorator re-running an iterative solver until it reports convergence.

    Each attempt is a fresh call with the same arguments, so solvers that draw
    their starting point from a passed-in generator restart from a new point.
    When no attempt converges the best result by ``score`` is returned.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            best = None
            for attempt in range(max_attempts):
                result = func(*args, **kwargs)
                if converged(result):
                    if attempt > 0:
                        logger.info(f"✅ {func.__name__} converged on attempt {attempt + 1}")
                    return result
                if best is None or score(result) > score(best):
                    best = result
                if attempt < max_attempts - 1:
                    logger.warning(
                        f"⚠️ Attempt {attempt + 1} of {func.__name__} did not converge "
                        f"(score {score(result):.6g}). Restarting..."
                    )
                    run_id = kwargs.get('run_id')
                    if run_id:
                        log_to_run_file(run_id, "retry", f"{func.__name__} attempt {attempt + 1} did not converge")
            logger.warning(f"⚠️ All {max_attempts} attempts of {func.__name__} stopped before convergence; keeping the best iterate")
            return best
        return wrapper
    return decorator


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration dict."""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent child seed from a root seed and an index path."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
