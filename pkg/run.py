#!/usr/bin/env python3
"""
Runner script for the event-grounding toolkit.

Checks the environment, then hands every argument to the CLI, so
``python run.py demo --preset default`` equals ``python -m src.cli demo --preset default``.
"""

import sys
from pathlib import Path


def check_environment():
    """Check if the environment is properly set up."""
    from src.config.config import Config

    output_dir = Path(Config.OUTPUT_DIR)
    output_dir.mkdir(parents=True, exist_ok=True)

    try:
        import torch  # noqa: F401
    except ImportError:
        print("Warning: torch is not installed; train-toy, generate and demo will fail.")
        print("Install the dependencies with: pip install -r requirements.txt")


def main():
    """Main entry point."""
    check_environment()

    from src.cli import main as cli_main
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
