"""
Train a small model and compare it with a Markov chain
======================================================

Dimensions are shrunk so a run takes seconds; the published sizes are the
``ModelConfig`` defaults.
"""
import time

from hgarn import HGARN, ModelConfig, build_graph, prepare
from hgarn.dataset import RawCheckin
from hgarn.evaluation import evaluate, markov_fit, markov_ranker, model_ranker
from hgarn.synth import SynthSpec, synth_generate
from hgarn.training import TrainSettings, train

rows, _ = synth_generate(SynthSpec(users=15, locations=120, activities=8,
                                   trajectories_per_user=20, trajectory_len=9))
ds = prepare([RawCheckin(r["user"], r["venue"], r["category"], r["lat"], r["lon"], r["ts"])
              for r in rows])
graph = build_graph(ds, 1.0)
print(f"{len(ds.train)} training / {len(ds.test)} test trajectories")

cfg = ModelConfig(ds.n_users, ds.n_activities, ds.n_locations, d=16, d_u=8, d_t=8, d_g=8, hidden=32)
model = HGARN(cfg, seed=0)
print("parameters:", model.parameter_count())

t0 = time.perf_counter()
result = train(ds, graph, model, TrainSettings(epochs=8, lr=0.005, eval_every=2))
for entry in result.log:
    r1 = entry["recall1_holdout"]
    print(f"  epoch {entry['epoch']}: loss {entry['loss_total']:.3f}"
          + (f", holdout Recall@1 {r1:.3f}" if r1 is not None else ""))
print(f"trained in {time.perf_counter() - t0:.0f}s")
model.load_state_dict(result.best_state)

reports = [evaluate(model_ranker(model, graph), ds.test, name="HGARN"),
           evaluate(markov_ranker(markov_fit(ds.train, ds.n_locations)), ds.test, name="MC")]
for rep in reports:
    print(f"\n{rep.model}")
    for setting, m in rep.metrics.items():
        if m:
            print(f"  {setting:12s}", "  ".join(f"R@{k} {v:.3f}" for k, v in m["recall"].items()))
