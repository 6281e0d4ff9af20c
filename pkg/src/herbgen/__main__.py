import sys

from herbgen.cli import main

sys.exit(main())
