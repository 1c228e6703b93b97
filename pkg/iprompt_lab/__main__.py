import sys

from iprompt_lab.cli import main

sys.exit(main())
