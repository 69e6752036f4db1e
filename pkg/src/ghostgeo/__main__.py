import sys

from ghostgeo.harness.cli import main

sys.exit(main())
