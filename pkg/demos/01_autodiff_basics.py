"""Tour of the tensor core: layer primitives and reverse-mode gradients.

Builds a tiny conv net by hand, backprops a loss, and cross-checks one
parameter's gradient against central finite differences.
"""

import numpy as np

from namseg import tensor as T

rng = np.random.default_rng(0)

# forward pass through every primitive
x = T.Tensor(rng.uniform(-1, 1, size=(1, 8, 8)))
conv_w = T.Tensor(rng.uniform(-0.5, 0.5, size=(4, 1, 3, 3)), requires_grad=True)
conv_b = T.Tensor(np.zeros(4), requires_grad=True)
fc_w = T.Tensor(rng.uniform(-0.5, 0.5, size=(2, 4)), requires_grad=True)
fc_b = T.Tensor(np.zeros(2), requires_grad=True)

h = T.relu(T.conv2d(x, conv_w, conv_b, pad=1))   # (4, 8, 8)
h = T.maxpool2(h)                                # (4, 4, 4)
feats = T.gap(h)                                 # (4,)
logits = T.fc(feats, fc_w, fc_b)                 # (2,)
loss = T.softmax_xent(logits, 1)
print(f"logits       : {logits.data.round(4)}")
print(f"loss         : {loss.item():.6f}")

# gradients for every parameter in one call
T.backward(loss)
print(f"dL/dfc_w     :\n{fc_w.grad.round(4)}")
print(f"|dL/dconv_w| : {np.abs(conv_w.grad).sum():.6f}")

# spot-check conv_w[0,0,1,1] against finite differences
h_step = 1e-5
i = (0, 0, 1, 1)


def loss_at(v):
    old = conv_w.data[i]
    conv_w.data[i] = v
    with T.no_grad():
        out = T.fc(T.gap(T.maxpool2(T.relu(T.conv2d(x, conv_w, conv_b, pad=1)))),
                   fc_w, fc_b)
    conv_w.data[i] = old
    return T.softmax_xent(T.Tensor(out.data), 1).item()


fd = (loss_at(conv_w.data[i] + h_step) - loss_at(conv_w.data[i] - h_step)) / (2 * h_step)
print(f"analytic grad: {conv_w.grad[i]:+.8f}")
print(f"finite diff  : {fd:+.8f}")
assert abs(conv_w.grad[i] - fd) < 1e-6
print("gradient check OK")
