"""
Embedding through a served label oracle
=======================================

The victim only exposes labels over a newline-delimited JSON socket.
Blind Walk runs unchanged against the remote client, and both sides
count the same number of queries.
"""

import numpy as np

from dsinfer.embeddings import EmbeddingConfig, embed_dataset
from dsinfer.models import ArchSpec, TrainConfig, init_model, train_sgd
from dsinfer.data import gaussian_blobs
from dsinfer.oracle_net import ServerConfig, connect_oracle, serve_model
from dsinfer.oracles import LocalOracle

data = gaussian_blobs(300, 4, 20, 0.3, seed=0)
model = train_sgd(init_model(ArchSpec("mlp", 20, 4, (32,)), 0), data, TrainConfig(epochs=20, lr0=0.05))
cfg = EmbeddingConfig(noise_scale=0.05)
points = data.subset(np.arange(20))

local = embed_dataset(LocalOracle(model), points, "private", cfg, seed=1)

with serve_model(model, ServerConfig(max_queries_per_connection=30_000)) as server:
    print("serving on %s:%d" % server.address)
    with connect_oracle(server.address) as oracle:
        remote = embed_dataset(oracle, points, "private", cfg, seed=1)
        print(f"client counted {oracle.queries_used} queries, server {server.total_queries}")

worst = max(np.max(np.abs(a.features - b.features)) for a, b in zip(local, remote))
print(f"largest local/remote feature difference: {worst}")
