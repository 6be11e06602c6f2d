import sys

from runner_shim import main

sys.exit(main())
