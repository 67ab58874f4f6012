from __future__ import annotations

import sys

from geoflow.cli import main

sys.exit(main())
