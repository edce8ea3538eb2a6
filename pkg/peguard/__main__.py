import sys

from peguard.cli import main

sys.exit(main())
