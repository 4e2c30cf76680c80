"""
Checking hand-written gradients
===============================

Every primitive in ``vidcount.autodiff`` records itself on a tape and
knows its own backward rule. Here we compare those rules against central
differences, first for a single convolution and then for a small
attention block built from several primitives.
"""

import numpy as np

from vidcount import autodiff as ad

rng = np.random.default_rng(0)

# A 3x3 convolution over a 2-channel 6x6 image.
x = rng.normal(size=(1, 2, 6, 6))
w = rng.normal(size=(4, 2, 3, 3))

err = ad.finite_difference_check(lambda t: ad.sum(ad.square(ad.conv2d(t, w, padding=1))), x, 1e-4)
print(f"conv2d, gradient w.r.t. input:  max relative error {err:.2e}")

err = ad.finite_difference_check(lambda t: ad.sum(ad.square(ad.conv2d(x, t, padding=1))), w, 1e-4)
print(f"conv2d, gradient w.r.t. kernel: max relative error {err:.2e}")

# Gradients also flow through compositions. Softmax attention on 5 tokens:
q = rng.normal(size=(5, 8))
probe = rng.normal(size=(5, 8))


def attention(t):
    weights = ad.softmax(t @ ad.transpose(t, (1, 0)) * (1 / np.sqrt(8)), axis=-1)
    # layer-norm rows sum to zero, so read them out through a random probe
    return ad.sum(ad.layer_norm(weights @ t) * probe)


print(f"attention block:               max relative error "
      f"{ad.finite_difference_check(attention, q, 1e-4):.2e}")

# Backpropagation itself returns one gradient array per leaf.
a = ad.Tensor(rng.normal(size=3), requires_grad=True, name="a")
b = ad.Tensor(rng.normal(size=3), requires_grad=True, name="b")
with ad.Tape():
    loss = ad.sum(ad.sigmoid(a * b))
    grads = ad.backpropagate(loss).by_name()
for name, g in grads.items():
    print(name, np.round(g, 4))
