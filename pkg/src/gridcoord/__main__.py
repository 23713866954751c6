import sys

from gridcoord.scenario_io.cli import main

sys.exit(main())
