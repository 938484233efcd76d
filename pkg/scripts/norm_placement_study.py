"""Pre-LN versus Post-LN for standard, boosted and width-matched standard models.

    python scripts/norm_placement_study.py --seeds 0,1,2 --out results/lm
"""

import argparse
import os
import time

from boostedattn.lm import Corpus, median_ppl, run_norm_placement_study


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--max-chars", type=int, default=None)
    parser.add_argument("--out", default="results/lm")
    args = parser.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    start = time.perf_counter()
    report = run_norm_placement_study(Corpus.bundled(args.max_chars), seeds, jobs=args.jobs)
    report.write(args.out)
    med = {c: median_ppl(report, c) for c in dict.fromkeys(r["condition"] for r in report.rows)}
    for cond, ppl in med.items():
        print(f"{cond:<14} median test ppl {ppl:8.3f}")
    print(f"boosted <= standard under Pre-LN: {med['boosted/pre'] <= med['standard/pre']}")
    print(f"boosted Post-LN worse than Pre-LN: {med['boosted/post'] > med['boosted/pre']}")
    print(f"wide beats standard under both: "
          f"{med['wide/pre'] < med['standard/pre'] and med['wide/post'] < med['standard/post']}")
    print(f"({time.perf_counter() - start:.0f} s)")


if __name__ == "__main__":
    main()
