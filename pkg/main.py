from __future__ import annotations

import sys

from condl.cli import cli_main

if __name__ == "__main__":
    try:
        sys.exit(cli_main())
    except KeyboardInterrupt:
        sys.exit(2)
