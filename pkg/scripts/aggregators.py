"""Frame aggregators on data whose paired classes differ only in frame order."""
import argparse
import json

from abg.config import desk_preset
from abg.data import ShiftSpec
from abg.experiments import Scenario, aggregator_arms, compare


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--n", type=int, default=512, help="videos per domain (and held-out targets)")
    p.add_argument("--out", help="write accuracies as JSON here")
    args = p.parse_args()
    cfg = desk_preset(epochs=args.epochs)
    scenario = Scenario(ShiftSpec(order=True), n_source=args.n, n_target=args.n, n_test=args.n)
    res = compare(aggregator_arms(cfg), scenario, range(args.seeds))
    print(res.summary())
    for name in ("trn", "lstm"):
        print(f"{name} - avg: {100 * (res.mean(name) - res.mean('avg')):+.1f} points")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"accuracies": res.accuracies, "seconds": res.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
