"""Spiking transformer kernel: multi-branch spatial cores, temporal batch norm,
and their fusion into single convolutions and folded thresholds."""

from ._stcore import *  # noqa: F401,F403
from ._stcore import cli as _cli


def main() -> int:
    import sys

    code, out, err = _cli(sys.argv[1:])
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code
