"""``python -m panelcausal``."""

import sys

from .cli import main

sys.exit(main())
