import sys

from splitstoch.cli import main

sys.exit(main())
