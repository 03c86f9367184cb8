import sys

from drbuf.cli import main

sys.exit(main())
