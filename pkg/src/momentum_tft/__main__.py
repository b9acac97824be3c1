"""``python -m momentum_tft``: the CLI with single-threaded BLAS.

Pinning BLAS to one thread keeps matrix products bitwise reproducible
whatever ``--threads`` says; that flag only sizes the changepoint pool.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")


def main() -> int:
    from .cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    raise SystemExit(main())
