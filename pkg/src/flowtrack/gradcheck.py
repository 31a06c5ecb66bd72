"""Central finite-difference checks for the loss and for whole networks."""
from dataclasses import dataclass

import numpy as np

from .tensor_core import DTYPE


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of float64 array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def agreement(analytic, numeric, rel=1e-2, abs_=1e-4):
    """Boolean mask: entries where either the absolute or the relative error is within bounds."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    return (err <= abs_) | (err <= rel * scale)


def _regions(net):
    """Which linear piece every piecewise unit is on: ReLU/leaky signs and pool argmaxes."""
    out = []
    for layer in net.layers:
        if layer.kind == "pool":
            out.append(layer._cache[1].copy())
        elif layer.activation in ("relu", "leaky_relu"):
            out.append(layer._cache[-1] > 0)
    return out


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class NetworkCheck:
    total: int            # parameters in the network
    kink: int             # parameters whose ±step perturbation switched a piecewise unit
    passed: int           # smooth parameters within tolerance
    raw_passed: int       # all parameters within tolerance, kinks included

    @property
    def fraction(self):
        """Pass rate over parameters away from a kink."""
        checked = self.total - self.kink
        return self.passed / checked if checked else 1.0

    @property
    def raw_fraction(self):
        return self.raw_passed / self.total if self.total else 1.0


def check_network(net, x, upstream, step=1e-3, rel=1e-2, abs_=1e-4):
    """Compare ``net.backward`` against central differences of <net(x), upstream>
    for every parameter.

    A parameter whose +step or -step perturbation moves any ReLU/leaky unit
    across zero, or changes a max-pool winner, straddles a point where the
    loss is not differentiable; it is counted under ``kink`` and left out of
    ``fraction`` (``raw_fraction`` keeps it).
    """
    upstream = np.asarray(upstream, dtype=np.float64)

    def loss():
        return float(np.sum(net.forward(x).astype(np.float64) * upstream))

    net.forward(x)
    base = _regions(net)
    grads, _ = net.backward(upstream.astype(DTYPE))
    total = kink = passed = raw = 0
    for layer, g in zip(net.layers, grads):
        for k, p in layer.params.items():
            flat, gflat = p.reshape(-1), g[k].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                hi, lo = DTYPE(old + DTYPE(step)), DTYPE(old - DTYPE(step))
                flat[i] = hi
                fp = loss()
                smooth = _same(base, _regions(net))
                flat[i] = lo
                fm = loss()
                smooth = smooth and _same(base, _regions(net))
                flat[i] = old
                num = (fp - fm) / (float(hi) - float(lo))   # the step actually taken in single precision
                ok = bool(agreement(gflat[i], num, rel, abs_))
                total += 1
                raw += ok
                if smooth:
                    passed += ok
                else:
                    kink += 1
    net.forward(x)
    return NetworkCheck(total, kink, passed, raw)
