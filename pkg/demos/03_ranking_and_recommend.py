"""The full two-stage flow through the on-disk pipeline.

Generates data, trains both stages, evaluates them and prints one user's
recommendations with the attention weights that explain them.  Artifacts
land in ``demo_run/`` (or ``$SKILLREC_OUT`` if set).

    python3 demos/03_ranking_and_recommend.py
"""

import os
from pathlib import Path

from skillrec import pipeline
from skillrec.config import RunConfig

out = Path(os.environ.get("SKILLREC_OUT", "demo_run"))
cfg = RunConfig.from_file(Path(__file__).resolve().parent.parent / "configs" / "toy.ini")

data = pipeline.synth(cfg, out / "data")
recall = pipeline.train_recall(cfg, data, out / "recall")
report = pipeline.eval_recall(recall["final"], data, out / "eval_recall", ks=cfg.ks, negatives=100)
print("Recall@K:", {k: round(v, 3) for k, v in report["recall"].items()})

rank = pipeline.train_rank(cfg, data, recall["final"], out / "rank")
rank_report = pipeline.eval_rank(rank["final"], out / "eval_recall" / "candidates.jsonl", data, out / "eval_rank")
print(f"AUC {rank_report['auc']:.3f}  MRR {rank_report['mrr']:.3f}")

rec = pipeline.recommend(rank["final"], data, "u00004", k=3, out_path=out / "recommend_u00004.json")
for r in rec["recommendations"]:
    print(f"\n{r['jd_id']}  click={r['click_score']:.3f}  recall cos={r['recall_score']:.3f}  neighbors={r['neighbors']}")
    last_layer = r["cls_item_attention"][-1]
    for i, item in enumerate(r["raw_items"]):
        weights = ", ".join(f"{head[i]:.2f}" for head in last_layer)
        print(f"   [{weights}] {item}")
    top_skill = max(range(len(r["skill_attention"])), key=r["skill_attention"].__getitem__)
    print(f"   most attended user skill: {top_skill}")
