"""Train the continuum families on the grouped-bias synthetic population.

Prints annotator-average F1, the sparsest annotator's F1 and the mean
pairwise text-encoder distance for sep_rec, averaged over seeds.

    python3 scripts/synthetic_continuum.py --seeds 3
"""

import argparse

from perspectra.experiments import SPARSEST, arm_name, synthetic_continuum
from perspectra.training import DEFAULT_SEEDS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=3, help="how many seeds from the fixed seed list")
    args = p.parse_args()

    def progress(r):
        div = f" divergence={r.divergence:.4g}" if r.divergence is not None else ""
        print(f"seed {r.seed} {arm_name(r.family, r.lam):<22} avg={r.average:6.2f} "
              f"sparsest={r.per_annotator[SPARSEST]:6.2f}{div} ({r.seconds:.1f}s)", flush=True)

    res = synthetic_continuum(DEFAULT_SEEDS[: args.seeds], progress=progress)
    print()
    print(res.table())
    maj = res.mean("majority")
    print()
    print(f"share_rec - majority: {res.mean('share_rec') - maj:+.2f}")
    print(f"sep_rec   - majority: {res.mean('sep_rec') - maj:+.2f}")
    print(f"sparsest annotator, per_annotator vs share_rec: "
          f"{res.mean('per_annotator', what='sparsest'):.2f} vs {res.mean('share_rec', what='sparsest'):.2f}")


if __name__ == "__main__":
    main()
