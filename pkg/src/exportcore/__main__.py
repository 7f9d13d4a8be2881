import sys

from exportcore.cli import main

sys.exit(main())
