"""Module entry point so ``python -m pixeldrop`` behaves like the console script."""

import sys

from pixeldrop.cli import main

if __name__ == "__main__":
    sys.exit(main())
