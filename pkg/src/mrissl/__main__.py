import sys

from mrissl.cli import main

sys.exit(main())
