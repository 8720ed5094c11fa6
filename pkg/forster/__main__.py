import sys

from forster.main import main

sys.exit(main())
