"""Print final metrics, paired gaps and head-to-head ratios for a finished run directory.

    python3 scripts/summarize_run.py runs/main
"""

import argparse

import numpy as np

from ilhf import harness as H


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run", help="run directory written by the ilhf CLI")
    parser.add_argument("--reference", default="kl/ilhf", help="metric used for paired gaps and thresholds")
    args = parser.parse_args()

    result = H.load_run(args.run)
    n = len(result.seeds)
    print(f"{result.config.experiment}: {n} seeds, fingerprint {result.fingerprint[:12]}")
    if n < 2:
        return
    names = [m for m in result.metric_names() if m.startswith("kl/")]
    ref = H.final_values(result, args.reference) if args.reference in names else None
    print(f"{'metric':<28}{'final mean':>12}{'stderr':>10}{'paired gap':>12}{'gap se':>10}")
    for name in names:
        final = H.final_values(result, name)
        mean, se = H.mean_stderr(final)
        gap = gap_se = float("nan")
        if ref is not None and name != args.reference:
            gap, gap_se = H.mean_stderr(final - ref)
        print(f"{name:<28}{mean:>12.4f}{se:>10.4f}{gap:>12.4f}{gap_se:>10.4f}")

    if ref is not None:
        print("\nepisodes to reach the reference's final value (per seed):")
        for name in names:
            if name == args.reference:
                continue
            hits = [H.episodes_to_threshold(result.seeds[s].metrics[name], r) for s, r in zip(sorted(result.seeds), ref)]
            mean, se = H.mean_stderr(np.array(hits, dtype=float))
            print(f"  {name:<26}{mean:>8.1f} +/- {se:.1f}")

    rows = H.head2head_summary(result)
    if rows:
        print("\nhead-to-head (mean over seeds):")
        for r in rows:
            print(f"  {r['candidate']} vs {r['reference']}: ratio {r['ratio']:.4f} +/- {r['stderr']:.4f}")


if __name__ == "__main__":
    main()
