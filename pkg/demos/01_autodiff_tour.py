"""A short tour of the reverse-mode engine that trains the nudging operators."""

import numpy as np

from nudgeforge import autodiff as ad

# plain arrays are constants; Tensors with requires_grad are leaves on the tape
w = ad.Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True, name="w")
tape = ad.Tape()
with tape:
    loss = ad.sum(ad.tanh(ad.mul(w, w)))
grads = ad.backward(tape, loss, {"w": w})
print("loss", float(loss.data))
print("dloss/dw", grads["w"])
print("by hand ", 2 * w.data / np.cosh(w.data**2) ** 2)

# circular convolutions take (batch, channels, *space) inputs and
# (C_out, C_in, *kernel) weights; a stride-2 transposed conv doubles the grid
x = np.random.default_rng(0).standard_normal((1, 1, 8))
up = ad.conv_transpose1d_circular(x, np.ones((1, 3, 5)), stride=2)
print("upsampled shape", up.shape)

# every gradient can be compared against central finite differences
rng = np.random.default_rng(1)
params = {"W": rng.standard_normal((4, 2, 5)), "x": rng.standard_normal((1, 2, 16))}
report = ad.gradient_check(lambda p: ad.sum(ad.tanh(ad.conv1d_circular(p["x"], p["W"]))), params)
for name, value in report.items():
    print(name, value)
