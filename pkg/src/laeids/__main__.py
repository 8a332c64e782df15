import sys

from laeids.harness.cli import main

sys.exit(main())
