"""Train on one family tree, then predict links on trees whose people and relations are all new.

The training tree has 127 people and two parent relations. The test graph joins
two fresh trees with four relation labels never seen in training. Nothing about
names carries over, so any success comes from structure alone.

    python3 demos/01_fd2_transfer.py
"""
from deqkg import (EncoderConfig, TrainConfig, TrainGraph, evaluate, fd2_bundles, init_encoder,
                   model_score_fn, random_baseline, train)

train_bundle, test_bundle = fd2_bundles([6], [6, 6])
print("train graph:", train_bundle.counts())
print("test graph: ", test_bundle.counts())

model = init_encoder(EncoderConfig(num_layers=2, seed=0))
model, history = train(model, [TrainGraph(train_bundle.observed, train_bundle.train, train_bundle.valid)],
                       TrainConfig(seed=0))
for rec in history.records():
    print(f"epoch {rec['epoch']}: loss {rec['loss']:.4f}")
print(f"kept the parameters from epoch {history.best_epoch}")

score = model_score_fn(model)
base = random_baseline(50, (1, 2, 10))
for task in ("node", "relation"):
    rep = evaluate(score, test_bundle.observed, test_bundle.test, task=task, ks=(1, 2, 10),
                   relation_protocol="sample")
    print(f"\n{task} prediction on the unseen trees ({rep.num_queries} grandparent queries)")
    for k, v in rep.metrics.items():
        print(f"  {k:8s} {v:.3f}   random guessing {base[k]:.3f}")
