"""Parameter layout and forward evaluation of the per-step subnetworks.

All trainable scalars live in one flat float64 vector ``theta``. A
:class:`Layout` maps named blocks (affine weight/bias slots, initial-value
heads, batch-norm scale/shift) to index ranges of that vector and verifies
at construction that the ranges are pairwise disjoint.

For the default architecture (two hidden layers of width ``d``) the slot
offsets follow the published closed-form layout:

* step-``n`` drift net ``A_n``: affine slots at ``(n d + 1)(d + 1)``,
  ``((N + n) d + 1)(d + 1)`` and ``((2 N + n) d + 1)(d + 1)``, each of
  shape ``d x d``;
* step-``n`` Hessian net ``G_n``: slots at ``((3 N + n) d + 1)(d + 1)``,
  ``((4 N + n) d + 1)(d + 1)`` and ``(5 N d + n d^2 + 1)(d + 1)``, the last
  with ``d^2`` outputs, reshaped row-major to ``d x d``.

An affine slot with offset ``v``, out-dim ``k`` and in-dim ``l`` reads the
weight matrix row-major from ``theta[v : v + k l]`` and the bias from
``theta[v + k l : v + k l + k]``.

In the single-path framework the initial values are free parameters:
``theta[0]`` is the value head, ``theta[1 : d + 1]`` the gradient head, and
the step-0 coefficients are the constant matrix/vector stored in
``theta[d + 1 : d^2 + d + 1]`` and ``theta[d^2 + d + 1 : d^2 + 2 d + 1]``.
In the minibatch framework all steps use networks and two extra heads
(a scalar-output net for the value, a vector-output net for the gradient)
are appended after the standard region, followed by batch-norm blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LayoutError",
    "NetworkConfig",
    "AffineSlot",
    "Layout",
    "ParamVector",
    "BatchNormState",
    "affine_apply",
    "rectifier",
    "subnet_forward",
    "subnet_a",
    "subnet_g",
    "head_initial_values",
    "batchnorm_apply",
    "init_theta",
    "save_checkpoint",
    "load_checkpoint",
]

BN_MOMENTUM = 0.99
BN_EPS = 1e-3


class LayoutError(ValueError):
    """Raised for overlapping or out-of-range parameter slices."""


@dataclass(frozen=True)
class NetworkConfig:
    d: int
    N: int
    framework: str = "specific"  # "specific" | "general"
    hidden_layers: int = 2
    hidden_width: int | None = None  # defaults to d
    use_batchnorm: bool = False
    bn_input: bool = True   # normalize the raw net input
    bn_output: bool = True  # normalize the net output (keeps coefficient scales bounded)

    def __post_init__(self):
        if self.d < 1 or self.N < 1:
            raise LayoutError(f"need d >= 1 and N >= 1, got d={self.d}, N={self.N}")
        if self.hidden_layers < 1:
            raise LayoutError("need at least one hidden layer")
        if (self.hidden_width or self.d) < 1:
            raise LayoutError("hidden width must be >= 1")
        if self.framework not in ("specific", "general"):
            raise LayoutError(f"unknown framework {self.framework!r}")
        if self.use_batchnorm and self.framework == "specific":
            raise LayoutError("batch normalization requires the minibatch framework")

    @property
    def width(self) -> int:
        return self.hidden_width if self.hidden_width is not None else self.d


@dataclass(frozen=True)
class AffineSlot:
    v: int  # offset: weights at theta[v : v+k*l] row-major, bias at theta[v+k*l : v+k*l+k]
    k: int  # out-dim
    l: int  # in-dim

    @property
    def stop(self) -> int:
        return self.v + self.k * (self.l + 1)


def _paper_slots(d: int, N: int, net: str, n: int) -> list[AffineSlot]:
    if net == "A":
        return [
            AffineSlot((n * d + 1) * (d + 1), d, d),
            AffineSlot(((N + n) * d + 1) * (d + 1), d, d),
            AffineSlot(((2 * N + n) * d + 1) * (d + 1), d, d),
        ]
    return [
        AffineSlot(((3 * N + n) * d + 1) * (d + 1), d, d),
        AffineSlot(((4 * N + n) * d + 1) * (d + 1), d, d),
        AffineSlot((5 * N * d + n * d * d + 1) * (d + 1), d * d, d),
    ]


class Layout:
    """Index map from named parameter blocks to ranges of the flat vector."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        d, N, w = config.d, config.N, config.width
        self.paper_offsets = config.hidden_layers == 2 and w == d
        self._net_slots: dict[tuple[str, int], list[AffineSlot]] = {}
        self._bn_slots: dict[tuple[str, int, int], tuple[int, int]] = {}  # site -> (offset, width)
        self.head_region = d * d + 2 * d + 1  # y0, z0, G0, A0 in the specific case

        standard = (5 * N * d + N * d * d + 1) * (d + 1)
        if self.paper_offsets:
            for n in range(N):
                self._net_slots[("A", n)] = _paper_slots(d, N, "A", n)
                self._net_slots[("G", n)] = _paper_slots(d, N, "G", n)
            cursor = standard
        else:
            cursor = self.head_region if config.framework == "specific" else 0
            for net, out in (("A", d), ("G", d * d)):
                for n in range(N):
                    slots, cursor = self._pack_net(cursor, d, w, out, config.hidden_layers)
                    self._net_slots[(net, n)] = slots

        if config.framework == "general":
            slots, cursor = self._pack_net(cursor, d, w, 1, config.hidden_layers)
            self._net_slots[("U", 0)] = slots
            slots, cursor = self._pack_net(cursor, d, w, d, config.hidden_layers)
            self._net_slots[("V", 0)] = slots
            if config.use_batchnorm:
                for net, out in (("A", d), ("G", d * d)):
                    for n in range(N):
                        for layer in self._bn_layers():
                            if layer == -1:
                                width = d
                            elif layer == config.hidden_layers:
                                width = out
                            else:
                                width = w
                            self._bn_slots[(net, n, layer)] = (cursor, width)
                            cursor += 2 * width  # gamma then beta
        self.nu = max(cursor, standard if self.paper_offsets else cursor)
        self._check_disjoint()

    @staticmethod
    def _pack_net(cursor, d, w, out, hidden_layers):
        dims = [(w, d)] + [(w, w)] * (hidden_layers - 1) + [(out, w)]
        slots = []
        for k, l in dims:
            slots.append(AffineSlot(cursor, k, l))
            cursor += k * (l + 1)
        return slots, cursor

    def _bn_layers(self):
        layers = list(range(self.config.hidden_layers))
        if self.config.bn_input:
            layers = [-1] + layers  # -1 normalizes the raw input
        if self.config.bn_output:
            layers.append(self.config.hidden_layers)  # after the output affine
        return layers

    def net_layers(self, net: str, n: int) -> list[AffineSlot]:
        """Affine slots of net ``net`` at step ``n``, input to output."""
        if net in ("U", "V"):
            return self._net_slots[(net, 0)]
        return self._net_slots[(net, n)]

    def bn_slot(self, net: str, n: int, layer: int) -> tuple[int, int, int]:
        """(gamma offset, beta offset, width) of a batch-norm site."""
        v, width = self._bn_slots[(net, n, layer)]
        return v, v + width, width

    def bn_sites(self):
        return sorted(self._bn_slots)

    # -- bookkeeping --------------------------------------------------------

    def blocks(self) -> list[tuple[str, int, int]]:
        """Every named block as (name, start, stop), heads included."""
        d = self.config.d
        out = []
        if self.config.framework == "specific":
            out += [
                ("head.y0", 0, 1),
                ("head.z0", 1, d + 1),
                ("head.G0", d + 1, d * d + d + 1),
                ("head.A0", d * d + d + 1, d * d + 2 * d + 1),
            ]
        for (net, n), slots in sorted(self._net_slots.items()):
            if self.config.framework == "specific" and n == 0 and net in ("A", "G"):
                continue  # step 0 uses the constant heads
            for li, s in enumerate(slots):
                out.append((f"{net}{n}.layer{li}", s.v, s.stop))
        for (net, n, layer), (v, width) in sorted(self._bn_slots.items()):
            out.append((f"bn.{net}{n}.layer{layer}", v, v + 2 * width))
        return out

    def _check_disjoint(self):
        events = sorted(self.blocks(), key=lambda b: b[1])
        prev_name, prev_stop = None, 0
        for name, start, stop in events:
            if start < 0 or stop > self.nu:
                raise LayoutError(f"block {name} [{start}, {stop}) outside [0, {self.nu})")
            if start < prev_stop:
                raise LayoutError(f"block {name} overlaps {prev_name}")
            prev_name, prev_stop = name, stop

    def unused_indices(self) -> np.ndarray:
        """Indices of theta not owned by any block (reported, initialized to 0)."""
        used = np.zeros(self.nu, dtype=bool)
        for _, start, stop in self.blocks():
            used[start:stop] = True
        return np.flatnonzero(~used)


@dataclass
class ParamVector:
    """Flat trainable vector together with its layout."""

    theta: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.layout.nu,):
            raise LayoutError(
                f"theta has shape {self.theta.shape}, layout needs ({self.layout.nu},)"
            )


# ---------------------------------------------------------------------------
# forward evaluation (plain numpy; the differentiable twin lives in scheme.py)
# ---------------------------------------------------------------------------


def affine_apply(theta: np.ndarray, v: int, k: int, l: int, x: np.ndarray) -> np.ndarray:
    """W x + b with W read row-major from theta[v : v+k*l], b following it.

    ``x`` may be a single vector of length ``l`` or a batch of shape (J, l).
    """
    if v + k * (l + 1) > theta.shape[0]:
        raise LayoutError(f"affine slot [{v}, {v + k * (l + 1)}) exceeds nu={theta.shape[0]}")
    W = theta[v:v + k * l].reshape(k, l)
    b = theta[v + k * l:v + k * (l + 1)]
    if x.ndim == 1:
        return W @ x + b
    return x @ W.T + b


def rectifier(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class BatchNormState:
    """Running first/second moments per normalization site."""

    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)

    def stats(self, site, width):
        if site not in self.mean:
            self.mean[site] = np.zeros(width)
            self.var[site] = np.ones(width)
        return self.mean[site], self.var[site]

    def update(self, site, batch_mean, batch_var):
        m, v = self.stats(site, batch_mean.shape[0])
        self.mean[site] = self.momentum * m + (1.0 - self.momentum) * batch_mean
        self.var[site] = self.momentum * v + (1.0 - self.momentum) * batch_var


def batchnorm_apply(state: BatchNormState, site, x: np.ndarray,
                    gamma: np.ndarray, beta: np.ndarray, mode: str = "train") -> np.ndarray:
    """Normalize a (J, k) batch, scale by gamma and shift by beta.

    Train mode uses batch statistics and folds them into the running
    statistics with the state's momentum; eval mode uses running statistics.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError(f"batch normalization needs batch size >= 2 in train mode, got {x.shape[0]}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        state.update(site, mu, var)
    else:
        mu, var = state.stats(site, x.shape[1])
    return gamma * (x - mu) / np.sqrt(var + state.eps) + beta


def subnet_forward(layout: Layout, theta: np.ndarray, net: str, n: int, x: np.ndarray,
                   bn_state: BatchNormState | None = None, mode: str = "eval") -> np.ndarray:
    """Evaluate one subnetwork; returns the raw output (flat for G nets)."""
    cfg = layout.config
    use_bn = cfg.use_batchnorm and net in ("A", "G")
    slots = layout.net_layers(net, n)

    def bn(z, layer):
        vg, vb, w = layout.bn_slot(net, n, layer)
        return batchnorm_apply(bn_state, (net, n, layer), z,
                               theta[vg:vg + w], theta[vb:vb + w], mode)

    z = x
    if use_bn and cfg.bn_input:
        z = bn(z, -1)
    last = len(slots) - 1
    for li, slot in enumerate(slots):
        z = affine_apply(theta, slot.v, slot.k, slot.l, z)
        if li < last:
            if use_bn:
                z = bn(z, li)
            z = rectifier(z)
        elif use_bn and cfg.bn_output:
            z = bn(z, last)
    return z


def subnet_a(layout: Layout, theta: np.ndarray, n: int, x: np.ndarray, **kw) -> np.ndarray:
    """Drift net at step n; (d,) for a vector input, (J, d) for a batch."""
    return subnet_forward(layout, theta, "A", n, x, **kw)


def subnet_g(layout: Layout, theta: np.ndarray, n: int, x: np.ndarray, **kw) -> np.ndarray:
    """Hessian net at step n, reshaped row-major to (d, d) or (J, d, d)."""
    d = layout.config.d
    out = subnet_forward(layout, theta, "G", n, x, **kw)
    if out.ndim == 1:
        return out.reshape(d, d)
    return out.reshape(-1, d, d)


def head_initial_values(layout: Layout, theta: np.ndarray):
    """(y0, z0, G0, A0) free-parameter heads of the single-path framework."""
    d = layout.config.d
    if layout.nu < d * d + 2 * d + 1:
        raise LayoutError(f"nu={layout.nu} too small for heads in dimension {d}")
    y0 = float(theta[0])
    z0 = theta[1:d + 1]
    g0 = theta[d + 1:d * d + d + 1].reshape(d, d)
    a0 = theta[d * d + d + 1:d * d + 2 * d + 1]
    return y0, z0, g0, a0


# ---------------------------------------------------------------------------
# initialization and checkpoints
# ---------------------------------------------------------------------------


def init_theta(layout: Layout, rng: np.random.Generator,
               y0_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Fresh parameter vector.

    Hidden affine weights are uniform on (-sqrt(6/(k+l)), +sqrt(6/(k+l))),
    biases zero. The output layers of the per-step coefficient nets start
    at zero: the unrolled recursion then starts from the heads alone, which
    keeps the cubic-nonlinearity benchmarks finite at step 0 (a random
    Hessian output feeds y^3 into blowup within a few steps). The value
    head (theta[0] or the scalar-output net's final bias) starts uniform on
    ``y0_range``; the remaining heads start uniform on (-0.1, 0.1).
    Batch-norm scales start at 1, shifts at 0.
    """
    theta = np.zeros(layout.nu)
    cfg = layout.config
    d = cfg.d
    skip_nets = {("A", 0), ("G", 0)} if cfg.framework == "specific" else set()
    out_bn = cfg.use_batchnorm and cfg.bn_output
    for (net, n), slots in sorted(layout._net_slots.items()):
        if (net, n) in skip_nets:
            continue
        for li, slot in enumerate(slots):
            last = li == len(slots) - 1
            if last and (net in ("U", "V") or (net in ("A", "G") and not out_bn)):
                continue  # zero output layer: the recursion starts from the heads alone
            bound = np.sqrt(6.0 / (slot.k + slot.l))
            theta[slot.v:slot.v + slot.k * slot.l] = rng.uniform(-bound, bound, slot.k * slot.l)
    if cfg.framework == "specific":
        theta[0] = rng.uniform(*y0_range)
        theta[1:d * d + 2 * d + 1] = rng.uniform(-0.1, 0.1, d * d + 2 * d)
    else:
        u_out = layout.net_layers("U", 0)[-1]
        theta[u_out.v + u_out.k * u_out.l] = rng.uniform(*y0_range)
        v_out = layout.net_layers("V", 0)[-1]
        bias = slice(v_out.v + v_out.k * v_out.l, v_out.stop)
        theta[bias] = rng.uniform(-0.1, 0.1, v_out.k)
        for site in layout.bn_sites():
            vg, vb, w = layout.bn_slot(*site)
            # output-site scales start at 0: the net output equals its shift
            # parameter until training opens the normalized channel, which
            # keeps the per-step coefficients from jumping to unit scale at
            # the first update (train-mode normalization is scale-free, so
            # any nonzero scale injects O(1) outputs no matter how small the
            # pre-normalization signal is)
            if site[2] != cfg.hidden_layers:
                theta[vg:vg + w] = 1.0
    return theta


def save_checkpoint(path, theta: np.ndarray, layout: Layout):
    """One JSON header line (layout descriptor) followed by raw float64 bytes."""
    cfg = layout.config
    header = {
        "d": cfg.d, "N": cfg.N, "framework": cfg.framework,
        "hidden_layers": cfg.hidden_layers, "hidden_width": cfg.width,
        "use_batchnorm": cfg.use_batchnorm, "bn_input": cfg.bn_input,
        "nu": layout.nu,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, Layout]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    cfg = NetworkConfig(
        d=header["d"], N=header["N"], framework=header["framework"],
        hidden_layers=header["hidden_layers"], hidden_width=header["hidden_width"],
        use_batchnorm=header["use_batchnorm"], bn_input=header["bn_input"],
    )
    layout = Layout(cfg)
    theta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if theta.shape[0] != header["nu"] or layout.nu != header["nu"]:
        raise LayoutError(
            f"checkpoint has {theta.shape[0]} parameters, header says {header['nu']}, "
            f"layout needs {layout.nu}"
        )
    return theta, layout
