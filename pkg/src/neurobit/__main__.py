"""``python -m neurobit``."""

import sys

from .cli import main

sys.exit(main())
