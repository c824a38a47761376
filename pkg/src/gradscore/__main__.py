import sys

from gradscore.cli import main

sys.exit(main())
