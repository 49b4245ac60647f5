"""Train the default desk model on the toy corpus and report held-out metrics.

    python3 scripts/toy_training.py [--seed 0] [--iters 2000] [--no-static] [--module arpp]
"""
import argparse

from retroconv.experiments import ToyRun, run_cached
from retroconv.train import OptimConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--module", default="arpp", choices=["arpp", "retro", "conv3d-pair"])
    p.add_argument("--no-static", action="store_true")
    p.add_argument("--fresh", action="store_true", help="ignore cached checkpoints")
    a = p.parse_args()
    run = ToyRun(a.module, a.seed, not a.no_static, OptimConfig(max_iters=a.iters))
    res = run_cached(run, fresh=a.fresh, emit=lambda line: print(line, flush=True))
    print(res.line())


if __name__ == "__main__":
    main()
