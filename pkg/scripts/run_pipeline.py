"""Run the full CLI pipeline on the reference synthetic config and summarize it.

    python scripts/run_pipeline.py --out runs/reference [--seed 0]
"""
import argparse
import json
import time
from pathlib import Path

from semstack.cli import run

STEPS = ["datagen", "train-dsr", "build-index", "eval-retrieval", "train-dpr", "eval-ranking", "bench", "export"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reference", help="run directory (default: %(default)s)")
    ap.add_argument("--seed", type=int, default=0, help="master seed (default: %(default)s)")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    for step in STEPS:
        t0 = time.perf_counter()
        code = run([step, "--out", str(out), "--seed", str(args.seed)])
        timings[step] = round(time.perf_counter() - t0, 1)
        if code != 0:
            print(f"{step} failed with exit code {code}")
            return code
    retrieval = json.loads((out / "eval_retrieval.json").read_text())
    ranking = json.loads((out / "eval_ranking.json").read_text())
    summary = {
        "seconds": timings,
        "recall@10": retrieval["recall_at_k"],
        "random_recall@10": retrieval["random_baseline"],
        "session_auc": {k: ranking[k]["session_auc"] for k in ("model", "oracle", "random")},
        "ndcg@5": {k: ranking[k]["ndcg@5"] for k in ("model", "oracle", "random")},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
