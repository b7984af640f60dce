import numpy as np

from app.errors import NonFiniteError, TensorError


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, parameters, lr=1e-3, momentum=0.9):
        self.parameters = list(parameters)
        if not self.parameters:
            raise TensorError("optimizer needs at least one parameter")
        if not lr > 0 or momentum < 0:
            raise TensorError(f"invalid optimizer settings lr={lr} momentum={momentum}")
        self.lr = lr
        self.momentum = momentum

    def step(self):
        """v = momentum * v + g; p = p - lr * v; then zero the gradients."""
        for p in self.parameters:
            p.velocity = self.momentum * p.velocity + p.grad
            p.data = p.data - self.lr * p.velocity
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"parameter {p.name or p.shape} became non-finite")
            p.zero_grad()

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()
