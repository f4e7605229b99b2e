import sys

from minseek_toolbox.cli import main

sys.exit(main())
