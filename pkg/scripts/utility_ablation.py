"""How much of the planted-utility oracle's session AUC each utility part carries.

    python scripts/utility_ablation.py [--seed 0]

Scores held-out sessions with the full planted utility and with the utility
minus one part at a time.  Parts the ranking tower cannot express (query/title
overlap, for example) bound how close a trained ranker can get to the oracle.
"""
import argparse

import numpy as np

from semstack.datagen import CatalogConfig, SessionConfig, generate_catalog, generate_sessions, planted_parts
from semstack.eval import ScoredSession, session_auc


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    config = SessionConfig()
    catalog = generate_catalog(CatalogConfig(), args.seed)
    sessions, _ = generate_sessions(catalog, config, args.seed)
    scored = [(planted_parts(catalog, s, config.utility_weights), [p.ordered for p in s.presented])
              for s in sessions if s.split == "test"]
    names = list(config.utility_weights)

    def auc(keep):
        return session_auc([ScoredSession(i, list(range(len(o))), sum(parts[n] for n in keep), o)
                            for i, (parts, o) in enumerate(scored)]).value

    full = auc(names)
    print(f"{'full utility':24s} {full:.4f}")
    for name in names:
        print(f"{'without ' + name:24s} {auc([n for n in names if n != name]):.4f}")
    numeric = ["ctr", "cvr", "sale_volume", "rating"]
    print(f"{'item numerics only':24s} {auc(numeric):.4f}")


if __name__ == "__main__":
    main()
