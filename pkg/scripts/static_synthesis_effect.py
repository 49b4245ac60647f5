"""Same seeds, with and without static sample synthesis: response to fully static clips.

The run trained with synthesized static samples should assign much lower
foreground probability to clips whose frames are all identical.
"""
import argparse

from retroconv.experiments import ToyRun, run_cached


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    with_s = run_cached(ToyRun(seed=a.seed), emit=lambda line: print(line, flush=True))
    without = run_cached(ToyRun(seed=a.seed, static_synthesis=False), emit=lambda line: print(line, flush=True))
    for r in (with_s, without):
        print(r.line())
    ratio = with_s.static_mean_prob / max(without.static_mean_prob, 1e-12)
    print(f"static-clip mean probability ratio (with / without) {ratio:.3f}")


if __name__ == "__main__":
    main()
