"""Run `python -m trojanbox`."""

# native
import sys

# pkg
from .cli import main

if __name__ == "__main__":
    sys.exit(main())
