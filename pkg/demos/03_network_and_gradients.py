"""
The two-headed network and a gradient check
===========================================

Six 3x3 convolution layers with two max-pools feed a global average pool.
The resulting 128-vector goes to a quality head (one number) and a scene
head (four logits). Gradients are written by hand, so we check them against
central finite differences on a shrunken copy of the network.
"""

import numpy as np

from sceneiqa.network import NetworkConfig, forward_arrays, init_weights, shape_trace
from sceneiqa.training import loss_and_grads

full = init_weights(NetworkConfig(), seed=0)
for name, shape in shape_trace(full):
    print("%-13s %s" % (name, shape))
print("parameters:", full.count())

# Shrink every width by 8 and use 8x8 inputs, then check in double precision.
small = init_weights(NetworkConfig().reduced(8, input_size=8), seed=3, dtype=np.float64)
rng = np.random.default_rng(1)
x = rng.standard_normal((4, 8, 8))
y = rng.uniform(-1, 1, 4)
s = np.array([0, 1, 2, 3])
_, _, _, grads = loss_and_grads(small, x, y, s, alpha=1.0)


def total_loss():
    loss, *_ = loss_and_grads(small, x, y, s, alpha=1.0)
    return loss


eps = 1e-6
for name in ("conv1.weight", "conv6.bias", "quality.out.weight", "scene.fc2.bias"):
    arr = small.params[name].reshape(-1)
    k = int(np.argmax(np.abs(grads[name].reshape(-1))))
    keep = arr[k]
    arr[k] = keep + eps
    up = total_loss()
    arr[k] = keep - eps
    down = total_loss()
    arr[k] = keep
    numeric = (up - down) / (2 * eps)
    print("%-20s analytic %+.6f  numeric %+.6f" % (name, grads[name].reshape(-1)[k], numeric))

q, logits, _ = forward_arrays(small, x)
print("quality outputs:", q.round(3))
