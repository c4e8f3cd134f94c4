"""
Gradients, optimizers and advantages from scratch
=================================================
"""
import numpy as np

from pickplace_hrl.hlc import compute_gae
from pickplace_hrl.nn import Adam, Mlp, MlpSpec, finite_difference_grad, relative_error

rng = np.random.default_rng(0)
net = Mlp(MlpSpec(5, 2, (8, 8)), rng)
x, y = rng.normal(size=(16, 5)), rng.normal(size=(16, 2))


def loss(p):
    probe = Mlp(net.spec, params=p)
    return 0.5 * np.mean((probe.forward(x, cache=False) - y) ** 2)


out = net.forward(x)
grads, _ = net.backward((out - y) / out.size)
print("backprop vs finite differences:", relative_error(grads, finite_difference_grad(loss, net.params)))

opt = Adam(net.params.size, lr=1e-2)
for i in range(301):
    out = net.forward(x)
    if i % 100 == 0:
        print(f"step {i:3d} loss {0.5 * np.mean((out - y) ** 2):.4f}")
    opt.step(net.params, net.backward((out - y) / out.size)[0])

# one sparse success at the end of a three-choice episode
print("GAE:", compute_gae([0, 0, 1], [0.2, 0.5, 0.8, 0.0], gamma=0.99, lam=0.95))
