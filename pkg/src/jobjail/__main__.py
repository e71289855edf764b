import sys

from jobjail.cli import main

sys.exit(main())
