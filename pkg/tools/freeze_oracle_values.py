"""Regenerate tests/frozen_values.py from independent reference implementations.

Requires PyTorch and scikit-learn (not dependencies of the package; only this
script uses them). Inputs are deterministic sine ramps so the tests can
rebuild them without any RNG:

    python tools/freeze_oracle_values.py > tests/frozen_values.py
"""
import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import f1_score

torch.set_default_dtype(torch.float64)


def ramp(shape, a=0.7, b=0.3):
    n = int(np.prod(shape))
    return np.sin(np.arange(n) * a + b).reshape(shape)


def t(x, grad=False):
    return torch.tensor(x, dtype=torch.float64, requires_grad=grad)


def arr(x):
    return np.asarray(x.detach().numpy() if isinstance(x, torch.Tensor) else x).round(12).tolist()


out = {}

# dense conv, stride 2, pad 1, plus its VJP against a ramp upstream
x, w = t(ramp((1, 2, 5, 5)), True), t(ramp((3, 2, 3, 3), 1.3, 0.1), True)
y = F.conv2d(x, w, stride=2, padding=1)
up = t(ramp(tuple(y.shape), 0.9, 0.5))
(y * up).sum().backward()
out["conv2d_s2p1"] = {"y": arr(y), "dx": arr(x.grad), "dw": arr(w.grad)}

# depthwise, dilation 3, same padding
x, w = t(ramp((1, 2, 7, 7), 0.4, 0.2), True), t(ramp((2, 1, 3, 3), 1.1, 0.7), True)
y = F.conv2d(x, w, padding=3, dilation=3, groups=2)
up = t(ramp(tuple(y.shape), 0.3, 0.1))
(y * up).sum().backward()
out["dwconv_d3"] = {"y": arr(y), "dx": arr(x.grad), "dw": arr(w.grad)}

# grouped dilated depthwise: 4 channels, dilation groups [1, 2]
x, w = t(ramp((1, 4, 6, 6), 0.5, 0.9), True), t(ramp((4, 1, 3, 3), 0.8, 0.4), True)
ys = [F.conv2d(x[:, 2 * g:2 * g + 2], w[2 * g:2 * g + 2], padding=d, dilation=d, groups=2)
      for g, d in enumerate([1, 2])]
y = torch.cat(ys, dim=1)
up = t(ramp(tuple(y.shape), 0.6, 0.2))
(y * up).sum().backward()
out["gddw_12"] = {"y": arr(y), "dx": arr(x.grad), "dw": arr(w.grad)}

# grouped pointwise conv, 8 -> 6 channels in 2 groups
x, w = t(ramp((1, 8, 2, 2), 0.45, 0.0), True), t(ramp((6, 4, 1, 1), 0.95, 0.25), True)
y = F.conv2d(x, w, groups=2)
up = t(ramp(tuple(y.shape), 0.35, 0.6))
(y * up).sum().backward()
out["pw_g2"] = {"y": arr(y), "dx": arr(x.grad), "dw": arr(w.grad)}

# 2x2 stride-2 pooling with ceil mode on a 5x5 map (max includes a tie)
xm = ramp((1, 1, 5, 5), 0.9, 0.0)
xm[0, 0, 0, 0] = xm[0, 0, 0, 1] = 2.0
for kind in ("max", "avg"):
    x = t(xm, True)
    y = (F.max_pool2d if kind == "max" else F.avg_pool2d)(x, 2, 2, ceil_mode=True)
    up = t(ramp(tuple(y.shape), 0.5, 0.5))
    (y * up).sum().backward()
    out[f"{kind}pool_ceil"] = {"y": arr(y), "dx": arr(x.grad)}

# batch norm: train step (output, running stats, VJP) then inference
x = t(ramp((2, 3, 2, 2), 0.77, 0.1) * 2 + 0.5, True)
g, b = t(np.array([1.0, 0.5, 2.0]), True), t(np.array([0.0, -0.3, 0.2]), True)
rm, rv = torch.zeros(3), torch.ones(3)
y = F.batch_norm(x, rm, rv, g, b, training=True, momentum=0.1, eps=1e-5)
up = t(ramp(tuple(y.shape), 0.2, 0.9))
(y * up).sum().backward()
yi = F.batch_norm(t(ramp((2, 3, 2, 2), 0.77, 0.1) * 2 + 0.5), rm, rv, g.detach(), b.detach(),
                  training=False, eps=1e-5)
out["batchnorm"] = {"y": arr(y), "running_mean": arr(rm), "running_var": arr(rv), "dx": arr(x.grad),
                    "dgamma": arr(g.grad), "dbeta": arr(b.grad), "y_infer": arr(yi)}

# GRN (residual form, eps 1e-6)
x = t(ramp((2, 3, 2, 2), 0.61, 0.4), True)
g, b = t(np.array([0.5, -1.0, 2.0]), True), t(np.array([0.1, 0.0, -0.2]), True)
gx = torch.sqrt((x * x).sum(dim=(2, 3), keepdim=True))
nx = gx / (gx.mean(dim=1, keepdim=True) + 1e-6)
y = g[None, :, None, None] * (x * nx) + b[None, :, None, None] + x
up = t(ramp(tuple(y.shape), 0.33, 0.2))
(y * up).sum().backward()
out["grn"] = {"y": arr(y), "dx": arr(x.grad), "dgamma": arr(g.grad), "dbeta": arr(b.grad)}

# softmax cross-entropy
logits = t(ramp((3, 4), 1.7, 0.2) * 3, True)
labels = torch.tensor([2, 0, 3])
loss = F.cross_entropy(logits, labels)
loss.backward()
out["cross_entropy"] = {"loss": float(loss.detach()), "dlogits": arr(logits.grad)}

# RMSProp (momentum 0.9, alpha 0.9, eps 1e-8, weight decay 1e-5), 3 steps
p = torch.nn.Parameter(t(ramp((5,), 0.9, 0.1)))
opt = torch.optim.RMSprop([p], lr=1e-3, alpha=0.9, eps=1e-8, weight_decay=1e-5, momentum=0.9)
for step in range(3):
    opt.zero_grad()
    p.grad = t(ramp((5,), 0.5 + step, 0.3))
    opt.step()
out["rmsprop_3steps"] = {"p": arr(p)}

# weighted F1 against scikit-learn
preds = (np.arange(40) * 7) % 5
labs = (np.arange(40) * 3 + (np.arange(40) // 7)) % 5
out["weighted_f1"] = {"preds": preds.tolist(), "labels": labs.tolist(),
                      "f1": float(f1_score(labs, preds, average="weighted"))}

print('"""Reference outputs frozen from tools/freeze_oracle_values.py (do not edit)."""')
print("# flake8: noqa")
print(f"VALUES = {out!r}")
