import sys

from gqe.cli.main import main

sys.exit(main())
