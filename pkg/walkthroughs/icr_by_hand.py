"""Iterative collaborative routing on three predictions, step by step.

Run: python walkthroughs/icr_by_hand.py
"""
import math

import numpy as np

from icrcaps.routing import icr_graph

s = math.sqrt(0.5)
# three 2-d predictions for one deeper capsule: east, north-east, north
q = np.array([[1.0, 0.0], [s, s], [0.0, 1.0]])

g = icr_graph(q[None], k=1, num_iter=1)
np.set_printoptions(precision=4, suppress=True)
print("cosine affinities\n", g["affinity"][0])
print("initial degree centrality (row sums):", g["dcen0"][0])
print("nearest neighbour of each node:", g["neighbors"][0, :, 0])
print("after one neighbour-mean step:", g["dcen"][0])
print("routing weights (softmax):", g["c"][0])

# the middle prediction agrees with both others, yet after smoothing it
# inherits the lower centrality of its neighbours and gets the smallest weight
for it in range(4):
    print(f"num_iter={it}:", icr_graph(q[None], k=1, num_iter=it)["c"][0])
