import sys

from nullora.cli import main

sys.exit(main())
