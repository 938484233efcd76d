"""Run the randomized geometric property checks and gradient checks for several seeds.

    python scripts/property_checks.py --seeds 0,1,2,3,4
"""

import argparse
import sys

from boostedattn.checks import run_gradcheck_suite, run_proposition_suite


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args()
    ok = True
    for seed in (int(s) for s in args.seeds.split(",")):
        print(f"== seed {seed}")
        for r in [*run_proposition_suite(seed), *run_gradcheck_suite(seed)]:
            print(r.line())
            ok &= r.passed
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
