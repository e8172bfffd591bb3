import sys

from crossdenoise.cli import main

sys.exit(main())
