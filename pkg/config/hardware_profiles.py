"""
Hardware Profile Detection

Resolves how many worker threads the embarrassingly parallel stages (per-query
retrieval evaluation, per-image head analysis) may use.

GGEM_THREADS caps the worker count; 0 or unset means auto-detect from the
physical core count. Training ignores this and always runs single-threaded so
its results stay bitwise reproducible.
"""

import multiprocessing
import os
from typing import Any, Dict

from ml.errors import ConfigError

try:
    import psutil
    PSUTIL_AVAILABLE = True
except ImportError:
    PSUTIL_AVAILABLE = False


# Upper bound for auto-detected workers; numpy kernels are small at desk scale
MAX_AUTO_WORKERS = 8


def detect_hardware_profile() -> Dict[str, Any]:
    """
    Detect CPU resources

    Returns:
        dict with 'logical_cpus', 'physical_cpus', 'memory_gb', 'auto_workers'
    """
    logical = multiprocessing.cpu_count()
    if PSUTIL_AVAILABLE:
        physical = psutil.cpu_count(logical=False) or logical
        memory_gb = psutil.virtual_memory().total / (1024 ** 3)
    else:
        physical = logical
        memory_gb = None

    return {
        'logical_cpus': logical,
        'physical_cpus': physical,
        'memory_gb': round(memory_gb, 1) if memory_gb is not None else None,
        'auto_workers': max(1, min(physical, MAX_AUTO_WORKERS)),
    }


def get_config_value(key: str, default=None):
    """
    Get configuration value from environment with type conversion

    Args:
        key: Environment variable key
        default: Default value if not set

    Returns:
        bool for true/false, then int, then float, else the raw string
    """
    value = os.getenv(key)

    if value is None:
        return default

    return convert_value(value)


def convert_value(value: str):
    """Type conversion shared by environment and config-file values"""
    if value.lower() in ('true', 'false'):
        return value.lower() == 'true'

    try:
        return int(value)
    except ValueError:
        try:
            return float(value)
        except ValueError:
            return value


def worker_count() -> int:
    """Worker threads allowed by GGEM_THREADS (0 = auto)"""
    requested = get_config_value('GGEM_THREADS', 0)
    if not isinstance(requested, int) or isinstance(requested, bool) or requested < 0:
        raise ConfigError(f"GGEM_THREADS must be a non-negative integer, got {requested!r}")
    if requested == 0:
        return detect_hardware_profile()['auto_workers']
    return requested
