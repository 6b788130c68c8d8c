import sys

from vfl_lab.cli import main

sys.exit(main())
