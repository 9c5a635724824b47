import sys

from cyberood.cli import main

sys.exit(main())
