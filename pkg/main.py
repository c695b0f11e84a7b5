"""
Main entry point for the Efficient Depth Toolkit
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
