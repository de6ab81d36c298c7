"""Parameter containers, layers, the Adam optimizer and the one-cycle schedule."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer."""

    __slots__ = ("name",)

    def __init__(self, values, name):
        super().__init__(values, requires_grad=True)
        self.name = name

    def freeze(self):
        self.requires_grad = False
        self.grad = None
        return self


def kaiming_uniform(rng, fan_in, shape, gain=np.sqrt(2.0)):
    """Kaiming-uniform fan-in init, U(+-gain * sqrt(3 / fan_in))."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, in_dim, out_dim, rng, name):
        self.weight = Parameter(kaiming_uniform(rng, in_dim, (in_dim, out_dim)),
                                f"{name}.weight")
        self.bias = Parameter(kaiming_uniform(rng, in_dim, (out_dim,)), f"{name}.bias")

    def __call__(self, x):
        return ad.linear_forward(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm:
    def __init__(self, dim, name, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training,
                             momentum=self.momentum, eps=self.eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self._scratch = [np.empty_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.step_count += 1
        for p, m, v, scratch in zip(self.params, self.m, self.v, self._scratch):
            if p.grad is None:
                continue
            adam_step(p.values, p.grad, m, v, self.step_count, lr,
                      self.beta1, self.beta2, self.eps, scratch=scratch)


def adam_step(values, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              scratch=None):
    """One Adam update, in place on values and moment buffers.

    Bias correction is folded into scalar factors:
    m_hat / (sqrt(v_hat) + eps) == (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
    """
    if scratch is None:
        scratch = np.empty_like(values)
    m *= beta1
    np.multiply(grad, 1.0 - beta1, out=scratch)
    m += scratch
    v *= beta2
    np.multiply(grad, grad, out=scratch)
    scratch *= 1.0 - beta2
    v += scratch
    np.sqrt(v, out=scratch)
    scratch /= np.sqrt(1.0 - beta2**t)
    scratch += eps
    np.divide(m, scratch, out=scratch)
    scratch *= lr / (1.0 - beta1**t)
    values -= scratch
    return values


class OneCycleSchedule:
    """Linear rise from start_lr to max_lr, then linear decay to end_lr.

    lr(0) == start_lr, the peak equals max_lr exactly, and the final value
    never exceeds start_lr.
    """

    def __init__(self, start_lr, max_lr, total_steps, pct_up=0.3, end_lr=None):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.start_lr = start_lr
        self.max_lr = max_lr
        self.total_steps = total_steps
        self.end_lr = start_lr / 100.0 if end_lr is None else end_lr
        last = total_steps - 1
        self.peak_step = max(1, round(pct_up * last)) if last > 0 else 0

    def lr(self, step):
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside schedule of {self.total_steps}")
        if step <= self.peak_step:
            if self.peak_step == 0:
                return self.start_lr
            frac = step / self.peak_step
            return self.start_lr + frac * (self.max_lr - self.start_lr)
        frac = (step - self.peak_step) / (self.total_steps - 1 - self.peak_step)
        return self.max_lr + frac * (self.end_lr - self.max_lr)


class MLP:
    """Stack of linear + leaky-ReLU + batch-norm blocks with a linear output.

    The layout used by the attribute and adversarial classifiers; dropout is
    applied after each hidden block when a rate is given.
    """

    def __init__(self, in_dim, hidden, out_dim, rng, name,
                 dropout=0.0, input_bn=False):
        self.dropout = dropout
        self.input_bn = BatchNorm(in_dim, f"{name}.bn_in") if input_bn else None
        self.blocks = []
        prev = in_dim
        for i, width in enumerate(hidden):
            lin = Linear(prev, width, rng, f"{name}.h{i}")
            bn = BatchNorm(width, f"{name}.h{i}.bn")
            self.blocks.append((lin, bn))
            prev = width
        self.out = Linear(prev, out_dim, rng, f"{name}.out")

    def __call__(self, x, training, rng=None):
        h = x
        if self.input_bn is not None:
            h = self.input_bn(h, training)
        for lin, bn in self.blocks:
            h = bn(ad.leaky_relu(lin(h)), training)
            if self.dropout > 0.0 and training:
                h = ad.dropout(h, self.dropout, rng, training)
        return self.out(h)

    def parameters(self):
        params = [] if self.input_bn is None else list(self.input_bn.parameters())
        for lin, bn in self.blocks:
            params += lin.parameters() + bn.parameters()
        return params + self.out.parameters()

    def buffers(self):
        bufs = [] if self.input_bn is None else list(self.input_bn.buffers())
        for _, bn in self.blocks:
            bufs += bn.buffers()
        return bufs
