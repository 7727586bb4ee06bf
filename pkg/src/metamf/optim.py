import numpy as np


class SGD:
    def __init__(self, parameters, lr=1e-3):
        self.parameters = list(parameters)
        self.lr = lr

    def step(self):
        for p in self.parameters:
            p.values -= p.values.dtype.type(self.lr) * p.grad

    def zero_grad(self):
        for p in self.parameters:
            p.grad[...] = 0


class Adam(SGD):
    def __init__(self, parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(parameters, lr)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.parameters]
        self.v = [np.zeros_like(p.values) for p in self.parameters]

    def step(self):
        self.t += 1
        beta1, beta2 = self.betas
        c1 = 1 - beta1**self.t
        c2 = 1 - beta2**self.t
        for p, m, v in zip(self.parameters, self.m, self.v):
            g = p.grad
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.values -= step.astype(p.values.dtype, copy=False)
