"""Run the synthetic retrieval suites and print them beside the reference accuracies.

    python scripts/retrieval_tables.py --out results/retrieval [--suites negative,rounds] [--seeds 0,1,2]
"""

import argparse
import os
import time

from boostedattn import experiments as ex

ONE_STEP = {(16, 4, 0.5): 71.1, (16, 4, 0.8): 55.0, (32, 8, 0.5): 53.1,
            (32, 8, 0.8): 36.4, (64, 16, 0.5): 46.5, (64, 16, 0.8): 26.1}
BAYES = {(16, 4, 0.5): 80.7, (16, 4, 0.8): 61.9, (32, 8, 0.5): 68.8,
         (32, 8, 0.8): 45.3, (64, 16, 0.5): 58.1, (64, 16, 0.8): 32.6}
CONVERGED = {4: 25.2, 8: 12.1, 16: 6.7}
ROUNDS = {1: 46.0, 2: 55.5, 3: 57.6, 4: 58.1, 5: 57.0}
GATES = {"none": 55.4, "scalar": 56.5, "mlp": 55.6}


def negative(seeds, jobs):
    report = ex.run_negative_suite(seeds, jobs=jobs)
    print(f"{'config':<14}{'chance':>8}{'one-step':>16}{'unrolled':>16}{'deq':>16}{'bayes':>16}")
    for d, K, s in ex.TABLE2_CONFIGS:
        m = lambda c: 100 * report.mean(d=d, K=K, sigma=s, condition=c)
        print(f"{f'({d},{K},{s})':<14}{100 / K:>8.1f}"
              f"{m('one_step'):>9.1f} ({ONE_STEP[(d, K, s)]:.1f})"
              f"{m('unrolled'):>9.1f} ({CONVERGED[K]:.1f})"
              f"{m('deq'):>9.1f} ({CONVERGED[K]:.1f})"
              f"{m('bayes'):>9.1f} ({BAYES[(d, K, s)]:.1f})")
    return report


def rounds(seeds, jobs):
    report = ex.run_rounds_ablation(seeds, jobs=jobs)
    for M, ref in ROUNDS.items():
        print(f"M={M}: {100 * report.mean(condition=f'M={M}'):6.2f}  (reference {ref})")
    print(f"Bayes ceiling: {100 * report.reference['bayes']:.2f}")
    return report


def gates(seeds, jobs):
    report = ex.run_gate_ablation(seeds, jobs=jobs)
    print(f"baseline (M=1): {100 * report.mean(condition='baseline'):6.2f}")
    for g, ref in GATES.items():
        print(f"{g:>8}: {100 * report.mean(condition=g):6.2f}  (reference {ref})")
    return report


def scaling(seeds, jobs):
    report = ex.run_scaling_ablation(seeds, jobs=jobs)
    gains = ex.scaling_gains(report)
    for (d, K, s), g in gains.items():
        bayes = 100 * report.mean(d=d, K=K, sigma=s, condition="bayes")
        print(f"({d},{K},{s}): boosted - standard {100 * g:+6.2f} pp   Bayes {bayes:6.2f}")
    return report


SUITES = {"negative": negative, "rounds": rounds, "gates": gates, "scaling": scaling}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--suites", default=",".join(SUITES))
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--out", default="results/retrieval")
    args = parser.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    for name in args.suites.split(","):
        print(f"== {name}")
        start = time.perf_counter()
        report = SUITES[name](seeds, args.jobs)
        report.write(args.out)
        print(f"({time.perf_counter() - start:.0f} s)\n")


if __name__ == "__main__":
    main()
