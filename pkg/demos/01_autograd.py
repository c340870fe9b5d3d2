"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""

import numpy as np

from modseq import autograd as ag

rng = np.random.default_rng(0)

# a tiny softmax regression: logits = x @ w, loss = cross entropy
x = ag.Tensor(rng.normal(size=(5, 3)))
w = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
labels = rng.integers(0, 4, 5)

loss = ag.cross_entropy(x @ w, labels)
ag.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# central differences on every entry of w
h = 1e-6
numeric = np.zeros_like(w.data)
for idx in np.ndindex(w.shape):
    orig = w.data[idx]
    w.data[idx] = orig + h
    up = ag.cross_entropy(x @ w, labels).item()
    w.data[idx] = orig - h
    down = ag.cross_entropy(x @ w, labels).item()
    w.data[idx] = orig
    numeric[idx] = (up - down) / (2 * h)

print("max abs difference", np.abs(numeric - w.grad).max())

# rms norm and relu go through the same tape
g = ag.Tensor(np.ones(3), requires_grad=True)
y = ag.sum(ag.relu(ag.rms_norm(x, g)))
ag.backward(y)
print("d sum(relu(rmsnorm(x))) / d gain", g.grad)
