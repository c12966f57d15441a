"""
Checking hand-written gradients
===============================

The network's backward pass is written by hand. Here a small MLP and the
nearest-neighbour loss are compared against central finite differences.
"""
import numpy as np

from unirit import metrics, nn

rng = np.random.default_rng(0)
stack = nn.MlpStack([3, 16, 8, 2], ["leaky_relu", "tanh", "none"], seed=1, dtype=np.float64)
x = rng.normal(size=(5, 3))
upstream = rng.normal(size=(5, 2))

stack.forward(x)
stack.backward(upstream)
analytic = stack.gradients()[0]

w = stack.weights[0]
h = 1e-6
numeric = np.zeros_like(w)
for idx in np.ndindex(*w.shape):
    old = w[idx]
    w[idx] = old + h
    plus = np.sum(stack(x) * upstream)
    w[idx] = old - h
    minus = np.sum(stack(x) * upstream)
    w[idx] = old
    numeric[idx] = (plus - minus) / (2 * h)
print("first-layer weight gradient, max abs error: %.2e" % np.abs(analytic - numeric).max())

# The one-sided nearest-neighbour RMS loss and its (sub)gradient.
a = rng.normal(size=(16, 3))
b = a + rng.normal(scale=0.05, size=(16, 3))
loss, grad = metrics.nn_rms_with_grad(a, b)
e = np.zeros_like(a)
e[0, 0] = 1e-4
numeric = (metrics.loss_global(a + e, b) - metrics.loss_global(a - e, b)) / 2e-4
print("loss %.4f, d/da[0,0] analytic %.6f numeric %.6f" % (loss, grad[0, 0], numeric))

# At a perfect fit the loss is 0 and its gradient is defined as 0.
print("gradient at zero loss:", np.abs(metrics.nn_rms_with_grad(a, a)[1]).max())
