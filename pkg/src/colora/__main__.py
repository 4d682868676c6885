"""Allow ``python -m colora``."""

import sys

from .cli import main

sys.exit(main())
