import sys

from maskbind.cli import main

sys.exit(main())
