import sys

from histosr.cli import main

sys.exit(main())
