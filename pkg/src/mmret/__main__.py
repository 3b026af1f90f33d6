import sys

from mmret.cli import main

sys.exit(main())
