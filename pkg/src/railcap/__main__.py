import sys

from railcap.cli import main

sys.exit(main())
