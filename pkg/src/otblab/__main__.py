import sys

from otblab.harness.cli import main

sys.exit(main())
