import sys

from kvbits.cli import main

sys.exit(main())
