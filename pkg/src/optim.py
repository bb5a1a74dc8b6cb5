import numpy as np


OPTIMIZERS = ("adaptive", "sgd")


class Optimizer:
    def __init__(self, params, lr):
        """
        @param params {name: trainable Tensor}, updated in place
        """
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")

        self.params = params
        self.lr = lr
        self.steps = 0

    def _grad(self, grads, t):
        g = grads.get(t.node_id)
        return None if g is None else g.data

    def step(self, grads):
        self.steps += 1
        for name, t in self.params.items():
            g = self._grad(grads, t)
            if g is not None:
                self.update(name, t, g)

    def update(self, name, t, g):
        raise NotImplementedError


class SGD(Optimizer):
    def update(self, name, t, g):
        t.data -= self.lr * g


class Adam(Optimizer):
    """
    Adaptive-moment first-order optimizer with bias correction
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def update(self, name, t, g):
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g

        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, params, lr):
    if name == "adaptive":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer: {name}")
