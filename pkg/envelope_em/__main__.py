import sys

from envelope_em.cli import main

sys.exit(main())
