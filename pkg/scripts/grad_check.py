"""Finite-difference check of every registered op; exit 1 on any failure."""

import sys

from blendcore import cli

sys.exit(cli.main(["gradcheck", *sys.argv[1:]]))
