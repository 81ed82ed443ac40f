import sys

from satlab.cli import main

sys.exit(main())
