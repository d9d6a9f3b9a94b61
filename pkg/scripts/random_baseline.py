"""Percentile recall of random embeddings against random relationship sets.

Each seed draws n i.i.d. Gaussian embeddings and a random set of gene pairs;
a random model should recall about 2q of the pairs.
"""

import argparse
import time

import numpy as np

from phenobench.aggregate import profile_perturbations
from phenobench.baselines import random_embeddings
from phenobench.relbench import RelationshipSet, recall_at_percentile
from phenobench.similarity import Origin


def random_pairs(ids, n_pairs, rng):
    pairs = set()
    while len(pairs) < n_pairs:
        a, b = rng.choice(len(ids), 2, replace=False)
        pairs.add((ids[a], ids[b]))
    return RelationshipSet("random", pairs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--q", type=float, default=0.05)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()

    start = time.perf_counter()
    recalls = []
    for seed in range(args.seeds):
        profs = profile_perturbations(random_embeddings(args.n, args.dim, seed))
        rel = random_pairs([p.perturbation_id for p in profs], args.pairs,
                           np.random.default_rng([seed, 99]))
        r, _ = recall_at_percentile(profs, rel, Origin.zero(args.dim), args.q)
        recalls.append(r)
        print(f"seed {seed:3d}  recall {r:.4f}")
    print(f"mean {np.mean(recalls):.4f}  sd {np.std(recalls, ddof=1):.4f}  "
          f"expected {2 * args.q:.4f}  ({time.perf_counter() - start:.1f}s)")


if __name__ == "__main__":
    main()
