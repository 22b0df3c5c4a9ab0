"""Train a small recall model and look inside it.

Trains on a synthetic dataset, prints the per-epoch Recall@K, then shows
the neighbors picked for one JD and the top recalled JDs for one held-out
user next to the JD that user actually holds.

    python3 demos/02_recall_stage.py
"""

from skillrec.model import JDStore, embed_pool
from skillrec.recall import recall_candidates
from skillrec.synth import SynthConfig, generate
from skillrec.training import RecallTrainer, TrainConfig, model_config_for


data = generate(SynthConfig(num_skills=10, num_titles=5, num_jds=600, num_users=600, seed=3)).dataset
mcfg = model_config_for(data, d=16, num_layers=1, n_local=3, n_global=1, max_items=8)
trainer = RecallTrainer(data, mcfg, TrainConfig(max_epochs=4, recall_negatives=200, eval_ks=(20, 50)))
result = trainer.run()
for row in result.log:
    print(f"epoch {row['epoch']}: loss {row['train_loss']:.3f}  Recall@20 {row['recall']['20']:.3f}")

model = trainer.model
store = JDStore(data.jds, mcfg.max_items)
pool_ids = sorted(data.jds)
pool = embed_pool(model, store, pool_ids, trainer.train_ids)

record = trainer.test_records[0]
jd = record.jd
print(f"\nneighbors of {jd.jd_id} (title {jd.title_id}):",
      [(n, data.jds[n].title_id) for n in pool.neighbors[jd.jd_id]])

preds = pool.pred_map()
top = recall_candidates(record.profile.skills, [(j, preds[j]) for j in pool_ids], 10)
print(f"\ntop recalled JDs for held-out user {record.profile.user_id} (holds {jd.jd_id}):")
for rank, (jd_id, score) in enumerate(top, 1):
    mark = "  <- paired JD" if jd_id == jd.jd_id else ""
    print(f"  {rank:2d}. {jd_id}  cos={score:.3f}  title={data.jds[jd_id].title_id}{mark}")
