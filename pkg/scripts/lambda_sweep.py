"""sep_rec coupling strength sweep on the synthetic population.

Negative lambda rewards encoder divergence, zero leaves encoders
independent, and large positive values pull them toward one shared encoder.

    python3 scripts/lambda_sweep.py --lambdas=-0.5,0,0.1,1,2 --seeds 1
"""

import argparse

from perspectra.experiments import synthetic_continuum
from perspectra.training import DEFAULT_SEEDS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lambdas", default="-0.5,0,0.1,1,2")
    p.add_argument("--seeds", type=int, default=1)
    args = p.parse_args()
    lams = [float(x) for x in args.lambdas.split(",")]
    arms = [("share_rec", 0.0)] + [("sep_rec", lam) for lam in lams]
    res = synthetic_continuum(DEFAULT_SEEDS[: args.seeds], arms=arms,
                              progress=lambda r: print(f"seed {r.seed} {r.family} lambda={r.lam:g} "
                                                       f"avg={r.average:.2f}", flush=True))
    print()
    print(res.table())


if __name__ == "__main__":
    main()
