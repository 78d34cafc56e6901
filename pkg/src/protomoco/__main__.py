import sys

from protomoco.cli import main

sys.exit(main())
