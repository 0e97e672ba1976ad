import sys

from rigidsynth.cli import main

sys.exit(main())
