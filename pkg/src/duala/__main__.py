import sys

from duala.cli import main

sys.exit(main())
