"""
A short tour of the tensor library
==================================

Build a tiny graph by hand, run backward, and compare the result with
central finite differences.  Everything is float64 numpy underneath.
"""

import numpy as np

from jointcodes import autodiff as ad
from jointcodes.autodiff import Tensor, finite_difference_check

rng = np.random.default_rng(0)

# leaves that want gradients
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
x = Tensor(rng.standard_normal((5, 4)))

# y = sum(relu(x @ w)^2)
h = ad.relu(x @ w)
y = ad.sum(ad.square(h))
ad.backward(y)
print("loss", y.item())
print("grad of w\n", w.grad)

# the analytic gradient, written out with plain numpy
pre = x.data @ w.data
manual = x.data.T @ (2 * np.maximum(pre, 0) * (pre > 0))
print("matches hand-derived gradient:", np.allclose(manual, w.grad))

# gradients accumulate until cleared
ad.backward(ad.sum(ad.square(ad.relu(x @ w))))
print("after a second backward the gradient doubled:", np.allclose(w.grad, 2 * manual))
w.zero_grad()

# convolutions get the same treatment
img = rng.random((2, 3, 8, 8))
kernel = Tensor(rng.standard_normal((4, 3, 3, 3)))
err = finite_difference_check(lambda t: ad.sum(ad.square(ad.conv2d(t, kernel, stride=2, padding=1))), img, 1e-5)
print(f"conv2d relative gradient error {err:.2e}")

# and so does the transposed convolution the decoder uses
up = Tensor(rng.standard_normal((3, 2, 3, 3)))
out = ad.conv_transpose2d(Tensor(img), up, stride=2, padding=1, output_padding=1)
print("upsampled shape", out.shape)
