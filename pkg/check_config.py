#!/usr/bin/env python
"""
Environment and configuration self-check: numerical dependencies, resolved run
configuration and available cores.
"""

import sys
import importlib
import logging
from typing import Dict, List, Optional, Tuple

import psutil
from pydantic import ValidationError

from config import RunConfig, load_run_config
from services.errors import ConfigError

# Настройка логирования
logger = logging.getLogger("check_config")

MODULES_TO_CHECK = [
    ("numpy", "arrays and linear algebra"),
    ("scipy", "LAPACK factorizations, sparse graphs, optimization"),
    ("sklearn", "nearest-neighbour search"),
    ("pydantic", "configuration validation"),
    ("dotenv", "KEY=value config files"),
    ("click", "command line"),
    ("psutil", "core count"),
    ("tqdm", "benchmark progress"),
]


def check_imports() -> Tuple[Dict[str, str], List[str]]:
    """Returns (module -> version for importable modules, missing module names)."""
    found, missing = {}, []
    for module_name, _ in MODULES_TO_CHECK:
        try:
            module = importlib.import_module(module_name)
            found[module_name] = getattr(module, "__version__", "unknown")
        except ImportError:
            missing.append(module_name)
    return found, missing


def check_cores() -> Dict[str, Optional[int]]:
    return {"logical": psutil.cpu_count(logical=True), "physical": psutil.cpu_count(logical=False)}


def check_configuration(path=None) -> Tuple[Optional[RunConfig], Optional[str]]:
    """Loads the run configuration; returns (config, None) or (None, error text)."""
    try:
        return load_run_config(path), None
    except (ConfigError, ValidationError) as e:
        return None, str(e)


def run_checks(path=None) -> Dict:
    """All checks as one report."""
    found, missing = check_imports()
    config, error = check_configuration(path)
    return {
        "modules": found,
        "missing_modules": missing,
        "cores": check_cores(),
        "config": config.model_dump() if config is not None else None,
        "config_error": error,
        "ok": not missing and error is None,
    }


def print_report(report: Dict, stream=None) -> None:
    stream = stream or sys.stderr
    print("=== Dependencies ===", file=stream)
    descriptions = dict(MODULES_TO_CHECK)
    for name, version in report["modules"].items():
        print(f"OK   {name} {version} ({descriptions[name]})", file=stream)
    for name in report["missing_modules"]:
        print(f"MISS {name} ({descriptions[name]})", file=stream)
    print("\n=== Cores ===", file=stream)
    print(f"logical={report['cores']['logical']}, physical={report['cores']['physical']}", file=stream)
    print("\n=== Configuration ===", file=stream)
    if report["config_error"]:
        print(f"ERROR {report['config_error']}", file=stream)
    else:
        for key, value in report["config"].items():
            print(f"{key.upper()}={'' if value is None else value}", file=stream)
    if report["missing_modules"]:
        print("\nInstall the missing modules: pip install -r requirements.txt", file=stream)


def main():
    report = run_checks(sys.argv[1] if len(sys.argv) > 1 else None)
    print_report(report)
    sys.exit(0 if report["ok"] else 2)


if __name__ == "__main__":
    main()
