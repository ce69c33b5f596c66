import numpy as np

from ..errors import NonFiniteGradientError


def init_momentum(params):
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in params]


def sgd_step(params, grads, lr, momentum_state, momentum=0.9):
    """One Nesterov-momentum SGD update, in place.

    ``v <- momentum * v + g`` then ``theta <- theta - lr * (g + momentum * v)``.
    With ``momentum=0`` this is plain SGD. All gradients are checked before
    anything is touched, so a non-finite gradient leaves the parameters and
    velocity unchanged.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for i, g in enumerate(grads):
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradientError(i, name)
            if arr.shape != params[i][name].shape:
                raise ValueError(f"layer {i} {name}: grad shape {arr.shape} != param shape {params[i][name].shape}")
    for p, g, v in zip(params, grads, momentum_state):
        for name, grad in g.items():
            vel = v[name]
            vel *= momentum
            vel += grad
            p[name] -= lr * (grad + momentum * vel)
    return params
