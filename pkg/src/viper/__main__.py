import sys

from viper.cli import main

sys.exit(main())
