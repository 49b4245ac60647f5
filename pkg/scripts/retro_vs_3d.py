"""Retrospective-conv change module against a pair of 3x3x3 convolutions, several seeds."""
import argparse

from retroconv.experiments import ToyRun, run_cached


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=3)
    a = p.parse_args()
    rows = []
    for seed in range(a.seeds):
        pair = [run_cached(ToyRun(change_module=m, seed=seed), emit=lambda line: print(line, flush=True))
                for m in ("retro", "conv3d-pair")]
        for r in pair:
            print(r.line(), flush=True)
        rows.append((seed, pair[0].f_measure, pair[1].f_measure))
    print(f"{'seed':>4} {'retro F':>8} {'3d F':>8} {'diff':>8}")
    for seed, fr, f3 in rows:
        print(f"{seed:>4} {fr:8.4f} {f3:8.4f} {fr - f3:+8.4f}")


if __name__ == "__main__":
    main()
