"""Shared test helpers: program-based random graphs and gradient checks."""

import numpy as np

from deep2bsde.autodiff import Tape

# Each program step: (kind, input refs, attrs, leaf flag). Refs are indices
# into the node list built so far; leaves carry their initial value and are
# re-seeded by eval_program so the same graph can be replayed at perturbed
# leaf values for finite differences.


def eval_program(program, leaf_values):
    tape = Tape()
    nodes = []
    li = 0
    for kind, refs, attrs in program:
        if kind == "leaf":
            nodes.append(tape.leaf(leaf_values[li]))
            li += 1
        elif kind == "const":
            nodes.append(tape.constant(attrs["value"]))
        else:
            nodes.append(tape.record(kind, [nodes[r] for r in refs], **attrs))
    return tape, nodes


def program_value(program, leaf_values):
    tape, nodes = eval_program(program, leaf_values)
    return float(tape.value(nodes[-1]))


def program_gradients(program, leaf_values):
    tape, nodes = eval_program(program, leaf_values)
    grads = tape.backward(nodes[-1])
    leaf_ids = [n for n, k in zip(nodes, (s[0] for s in program)) if k == "leaf"]
    return [grads[i] for i in leaf_ids]


def fd_gradients(program, leaf_values, h=1e-6):
    out = []
    for li, base in enumerate(leaf_values):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        bflat = base.reshape(-1)
        for i in range(bflat.size):
            vp = [v.copy() if hasattr(v, "copy") else v for v in leaf_values]
            vm = [v.copy() if hasattr(v, "copy") else v for v in leaf_values]
            vp[li] = np.array(vp[li], dtype=np.float64)
            vm[li] = np.array(vm[li], dtype=np.float64)
            vp[li].reshape(-1)[i] += h
            vm[li].reshape(-1)[i] -= h
            flat[i] = (program_value(program, vp) - program_value(program, vm)) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(an, fd, rtol=1e-5, atol=1e-6):
    for a, f in zip(an, fd):
        err = np.abs(a - f)
        bound = atol + rtol * np.maximum(np.abs(a), np.abs(f))
        assert np.all(err <= bound), f"gradient mismatch: max err {err.max()}, bound {bound.min()}"


def random_program(rng, include_batchnorm=False):
    """A small random scalar-rooted graph with kink-free leaf domains.

    Leaves stay away from 0 so relu straddles no kink, and nodes fed to
    ln/reciprocal are kept positive. Programs whose intermediate values
    exceed 100 are rejected by the caller (finite differences lose accuracy
    at large magnitudes).
    """
    program = []
    leaves = []
    shapes = []

    def add_leaf(shape, low, high, signed=True):
        vals = rng.uniform(low, high, size=shape)
        if signed:
            vals *= rng.choice([-1.0, 1.0], size=shape)
        program.append(("leaf", (), {}))
        leaves.append(vals)
        shapes.append(vals.shape)
        return len(program) - 1

    d = int(rng.integers(2, 8))
    a = add_leaf((d,), 0.2, 1.5)
    b = add_leaf((d,), 0.2, 1.5)
    M = add_leaf((d, d), 0.2, 1.0)

    def rec(kind, refs, **attrs):
        program.append((kind, tuple(refs), attrs))
        return len(program) - 1

    v1 = rec(rng.choice(["add", "sub", "mul"]), [a, b])
    v2 = rec("mat-vec", [M, v1])
    pos = rec("square", [add_leaf((d,), 0.4, 1.2)])  # strictly positive vector
    v3 = rec(rng.choice(["ln", "reciprocal"]), [pos])
    v4 = rec("relu", [add_leaf((d,), 0.3, 1.5)])
    mix = rec("add", [v2, rec("mul", [v3, v4])])
    mix = rec("scalar-mul", [mix], c=float(rng.uniform(0.3, 1.5)))
    if include_batchnorm:
        xb = add_leaf((4, d), 0.2, 1.2)
        gmm = add_leaf((d,), 0.5, 1.5, signed=False)
        bta = add_leaf((d,), 0.2, 0.8)
        bn = rec("batchnorm", [xb, gmm, bta], eps=1e-3, mode="train")
        row = rec("row-sum", [bn])
        mat = rec("matmul", [rec("gather-cols", [bn], idx=np.arange(d // 2)),
                             add_leaf((4, d // 2), 0.2, 1.0)], transpose_b=True)
        mix2 = rec("sum", [rec("add", [row, mat])])
        scaled_mean = rec("scalar-mul", [rec("mean", [mix])], c=0.2)
        root = rec("add", [mix2, rec("exp", [scaled_mean])])
    else:
        choice = rng.choice(["squared-norm", "mean", "sum", "inner"])
        if choice == "inner":
            root = rec("inner-product", [mix, b])
        else:
            root = rec(choice, [mix])
        tail = rec("cube", [rec("scalar-mul", [rec("trace", [M])], c=0.3)])
        root = rec("add", [root, rec("exp", [rec("scalar-mul", [tail], c=0.05)])])
    del root
    return program, leaves
