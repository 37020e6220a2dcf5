"""Entry point for dppkit when called with python -m dppkit."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
