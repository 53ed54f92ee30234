"""Decoupled-weight-decay adaptive-moment optimizer and the toy training loop."""

import numpy as np

from .dataset import collate
from .diffusion import DDIMSchedule, ldm_loss
from .tensor import NumericsError


class TrainingError(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay; constant learning rate."""

    def __init__(self, params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - np.float32(self.lr) * update).astype(np.float32)


def train_toy(
    model,
    dataset,
    steps,
    rng,
    lr=5e-5,
    batch_size=4,
    dropout_p=0.1,
    weight_decay=0.01,
    sched=None,
    log_fn=None,
):
    """Run `steps` optimizer steps over the dataset (cycled in order).

    Returns (loss curve, checkpoint WeightMap). A non-finite loss aborts
    with the offending step index.
    """
    if steps < 1:
        raise ValueError("need steps >= 1")
    sched = sched or DDIMSchedule()
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    curve = []
    n = len(dataset)
    for step in range(steps):
        picks = [dataset[(step * batch_size + j) % n] for j in range(batch_size)]
        batch = collate(picks)
        try:
            loss = ldm_loss(batch, model, sched, rng, dropout_p=dropout_p)
            value = loss.item()
            model.zero_grad()
            loss.backward()
        except NumericsError as e:
            raise TrainingError(f"non-finite loss at step {step}: {e}") from e
        opt.step()
        model.invalidate_caches()
        curve.append(value)
        if log_fn is not None:
            log_fn(step, value, opt.lr)
    return curve, model.state_dict()
