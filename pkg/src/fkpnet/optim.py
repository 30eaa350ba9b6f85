"""Mean-squared-error loss, Adam updates, and a finite-difference checker."""

from __future__ import annotations

import numpy as np

from .layers import Model, Parameter


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of squared differences over every entry, with its gradient.

    The mean runs over batch and coordinate dimensions together, so
    sqrt(loss) is the RMSE of the same predictions.
    """
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.dot(diff.reshape(-1), diff.reshape(-1))) / n
    if not np.isfinite(loss):
        raise FloatingPointError("mse_loss: non-finite loss")
    return loss, (2.0 / n) * diff


class Adam:
    """Adam with bias correction; hyperparameter defaults lr=0.001,
    beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[Parameter], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _loss_of(model: Model, x: np.ndarray, target: np.ndarray) -> float:
    loss, _ = mse_loss(model.forward(x), target)
    return loss

def _relative_error(a: float, b: float) -> float:
    # the 1e-6 floor turns the test absolute for near-zero gradients, whose
    # magnitude sits below the central-difference noise floor (~1e-12 here)
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def grad_check(model: Model, x: np.ndarray, target: np.ndarray,
               step: float = 1e-5, max_samples_per_param: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    Run on a float64 model in eval mode (dropout off) so the loss surface is
    deterministic and the 1e-5 step resolves. 0 samples means check every
    parameter entry; otherwise an evenly strided subset is probed.
    """
    out = model.forward(x)
    loss_grad = mse_loss(out, target)[1]
    model.backward(loss_grad)
    worst = 0.0
    for p in model.parameters():
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        n = flat.size
        if max_samples_per_param and n > max_samples_per_param:
            idxs = np.unique(np.linspace(0, n - 1, max_samples_per_param).round().astype(int))
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = _loss_of(model, x, target)
            flat[i] = orig - step
            lm = _loss_of(model, x, target)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            worst = max(worst, _relative_error(float(analytic[i]), numeric))
    return worst
