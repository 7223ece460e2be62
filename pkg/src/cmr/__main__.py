import sys

from cmr.cli import main

sys.exit(main())
