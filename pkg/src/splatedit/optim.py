"""Adam over named numpy arrays, updated in place."""
import numpy as np


class Adam:
    """Adam with one learning rate per named parameter group.

    ``params`` maps names to arrays that are modified in place by
    :meth:`step`. ``lr`` is a float or a ``{name: float}`` mapping.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-15):
        self.params = params
        self.lr = dict(lr) if isinstance(lr, dict) else {k: float(lr) for k in params}
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, rows=None):
        """Apply one update. ``rows`` (bool or index array) restricts the update
        to those leading-axis rows; all other entries stay bit-identical."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            if name not in self.params:
                continue
            lr = self.lr.get(name, 0.0)
            p, m, v = self.params[name], self.m[name], self.v[name]
            if rows is None:
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                if lr != 0.0:
                    p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            else:
                gr = g[rows]
                m[rows] = self.b1 * m[rows] + (1.0 - self.b1) * gr
                v[rows] = self.b2 * v[rows] + (1.0 - self.b2) * gr * gr
                if lr != 0.0:
                    p[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)

    def rebind(self, params, keep=None):
        """Point at new arrays (e.g. after densification). ``keep`` is an index
        array selecting which old rows' moments survive; new rows start at zero."""
        for name, arr in params.items():
            old_m, old_v = self.m[name], self.v[name]
            m = np.zeros_like(arr)
            v = np.zeros_like(arr)
            if keep is not None:
                n = min(len(keep), len(arr))
                m[:n] = old_m[keep[:n]]
                v[:n] = old_v[keep[:n]]
            self.m[name], self.v[name] = m, v
        self.params = params
