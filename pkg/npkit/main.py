"""命令行主入口"""

import sys

from npkit.cli import dispatch


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
