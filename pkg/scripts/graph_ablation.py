"""ABG with and without the bipartite graphs (identity pass-through)."""
import argparse
import json

from abg.config import desk_preset
from abg.data import ShiftSpec
from abg.experiments import Scenario, compare, graph_arms


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--n", type=int, default=512, help="videos per domain (and held-out targets)")
    p.add_argument("--out", help="write accuracies as JSON here")
    args = p.parse_args()
    cfg = desk_preset(epochs=args.epochs)
    scenario = Scenario(ShiftSpec(), n_source=args.n, n_target=args.n, n_test=args.n)
    res = compare(graph_arms(cfg), scenario, range(args.seeds))
    print(res.summary())
    print(f"graph contribution: {100 * (res.mean('abg') - res.mean('no_graph')):+.1f} points")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"accuracies": res.accuracies, "seconds": res.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
