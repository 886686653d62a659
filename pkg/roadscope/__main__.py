import sys

from roadscope.cli.main import main

sys.exit(main())
