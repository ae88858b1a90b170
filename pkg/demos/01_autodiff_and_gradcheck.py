"""
The tape, one attention layer and a finite-difference check
============================================================

Everything in the model is a 2-D float64 matrix. Operations run inside a
``Tape`` are recorded and ``backward`` replays them in reverse.
"""
import numpy as np

from hgarn import tensor as T
from hgarn.gradcheck import check_gradients
from hgarn.model import gat_layer
from hgarn.tensor import Tape, Tensor, backward

rng = np.random.default_rng(0)

# a tiny loss: sum of squares of a matrix product
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))
with Tape() as tape:
    y = x @ w
    loss = (y * y).sum()
backward(tape, loss)
print("loss", round(loss.item(), 4))
print("dloss/dw matches 2 x^T x w:", np.allclose(w.grad, 2 * x.data.T @ x.data @ w.data))

# one graph attention layer on a 5-node ring with self-loops
n = 5
mask = np.eye(n, dtype=bool) | np.roll(np.eye(n, dtype=bool), 1, axis=1) | np.roll(np.eye(n, dtype=bool), -1, axis=1)
params = {}
for k in range(2):
    params[f"g.W{k}"] = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    params[f"g.a_src{k}"] = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    params[f"g.a_dst{k}"] = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
params["g.W"] = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
params["g.b"] = Tensor(np.zeros((1, 2)), requires_grad=True)
h = Tensor(rng.normal(size=(n, 4)), requires_grad=True)

attention = []
out = gat_layer(h, mask, params, "g", heads=2, attention_out=attention)
print("\nhead 0 attention (each row covers a node and its two ring neighbours):")
print(np.round(attention[0], 3))
print("row sums", attention[0].sum(axis=1))

# compare the tape with central differences, parameter by parameter
errors = check_gradients(lambda: T.tanh(gat_layer(h, mask, params, "g", 2)).sum(),
                         {**params, "h": h})
print("\nmax relative error per parameter:")
for name, err in errors.items():
    print(f"  {name:8s} {err:.1e}")
