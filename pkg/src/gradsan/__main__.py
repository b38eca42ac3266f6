import sys

from gradsan.cli import main

sys.exit(main())
