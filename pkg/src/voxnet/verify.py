"""Independent oracles and the verification suites built on them.

Each oracle recomputes a quantity by a route that shares no code with the
implementation it checks: a direct-loop convolution, all-pairs AUC counting,
central finite differences, and Monte-Carlo batch sampling.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import balanced_batch_plan, naive_batch_plan, single_class_batches
from .evaluation import roc_auc
from .models import build_voxcnn, build_voxresnet
from .network import (
    BatchNorm, Conv3D, Dense, Dropout, Flatten, MaxPool3D, Network, ReLU,
    SoftmaxOutput, VoxResBlock, init_params,
)

GRAD_RTOL = 1e-2
GRAD_ATOL = 1e-4
GRAD_SMALL = 1e-2
FD_STEP = 1e-2
ARCH_FD_STEP = 1e-6
CONV_RTOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst={self.worst:.3g} {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------- conv oracle


def direct_conv3d(x, w, bias, stride, padding):
    """Reference convolution by explicit loops over output voxels and kernel taps."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, D, H, W = x.shape
    O, _, KD, KH, KW = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    od = (D + 2 * pd - KD) // sd + 1
    oh = (H + 2 * ph - KH) // sh + 1
    ow = (W + 2 * pw - KW) // sw + 1
    out = np.zeros((B, O, od, oh, ow))
    for z in range(od):
        for y in range(oh):
            for xx in range(ow):
                acc = np.tile(np.asarray(bias, dtype=np.float64), (B, 1))
                for i in range(KD):
                    iz = z * sd - pd + i
                    if iz < 0 or iz >= D:
                        continue
                    for j in range(KH):
                        iy = y * sh - ph + j
                        if iy < 0 or iy >= H:
                            continue
                        for k in range(KW):
                            ix = xx * sw - pw + k
                            if ix < 0 or ix >= W:
                                continue
                            for c in range(C):
                                acc += np.outer(x[:, c, iz, iy, ix], w[:, c, i, j, k])
                out[:, :, z, y, xx] = acc
    return out


def random_conv_case(rng, max_extent=7):
    """A random conv parameterization with all extents <= ``max_extent`` and a valid output."""
    while True:
        D, H, W = rng.integers(1, max_extent + 1, 3)
        k = tuple(int(v) for v in rng.integers(1, 4, 3))
        s = tuple(int(v) for v in rng.integers(1, 4, 3))
        p = tuple(int(v) for v in rng.integers(0, 3, 3))
        if all(n + 2 * pp >= kk for n, kk, pp in zip((D, H, W), k, p)):
            break
    b = int(rng.integers(1, 3))
    ci = int(rng.integers(1, 4))
    co = int(rng.integers(1, 4))
    x = rng.standard_normal((b, ci, D, H, W)).astype(np.float32)
    w = rng.standard_normal((co, ci) + k).astype(np.float32)
    bias = rng.standard_normal(co).astype(np.float32)
    return x, w, bias, ops.ConvSpec(ci, co, k, s, p)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def conv_oracle_suite(n_cases=100, seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        x, w, bias, spec = random_conv_case(rng)
        got = ops.conv3d(x, w, bias, spec)
        want = direct_conv3d(x, w, bias, spec.stride, spec.padding)
        worst = max(worst, rel_err(got, want))
    return SuiteResult("conv-oracle", worst <= CONV_RTOL, worst,
                       f"{n_cases} random shapes, tol {CONV_RTOL:g}", time.perf_counter() - t0)


# ---------------------------------------------------------------- AUC oracle


def pairwise_auc(scores, labels):
    """Exhaustive positive/negative pair count; ties count one half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def random_auc_case(rng, max_n=12):
    n = int(rng.integers(2, max_n + 1))
    labels = np.zeros(n, dtype=np.int64)
    n_pos = int(rng.integers(1, n))
    labels[rng.choice(n, n_pos, replace=False)] = 1
    # a coarse grid forces frequent ties
    scores = rng.integers(0, int(rng.integers(2, 8)), n) / 4.0
    return scores, labels


def auc_oracle_suite(n_cases=500, seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst = 0.0
    for _ in range(n_cases):
        scores, labels = random_auc_case(rng)
        a = roc_auc(scores, labels)
        for candidate in (pairwise_auc(scores, labels), roc_auc(np.exp(scores), labels),
                          roc_auc(3.0 * scores + 1.0, labels)):
            worst = max(worst, abs(a - candidate))
            mismatches += a != candidate
        flipped = roc_auc(scores, 1 - labels)
        mismatches += (a + flipped) != 1.0
    return SuiteResult("auc-oracle", mismatches == 0, worst,
                       f"{n_cases} instances n<=12, {mismatches} mismatches", time.perf_counter() - t0)


# ---------------------------------------------------------------- batch balance


def naive_single_class_rate(b, n_per_class=1000, epochs=200, seed=0):
    """Monte-Carlo rate of single-class batches under shuffle-and-chunk sampling."""
    labels = np.repeat([0, 1], n_per_class)
    bad = total = 0
    for e in range(epochs):
        plan = naive_batch_plan(labels, b, seed * 100003 + e)
        full = [batch for batch in plan.batches if len(batch) == b]
        bad += sum(1 for batch in full if len(np.unique(labels[batch])) < 2)
        total += len(full)
    return bad / total


def batch_balance_suite(n_plans=10_000, batch_sizes=(3, 5), seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = 0
    for t in range(n_plans):
        b = batch_sizes[t % len(batch_sizes)]
        counts = rng.integers(1, 40, 2)
        labels = np.repeat([0, 1], counts)
        bad += single_class_batches(balanced_batch_plan(labels, b, seed + t), labels)
    worst_dev = 0.0
    rates = {}
    for b in batch_sizes:
        analytic = 2 * 0.5 ** b
        rate = naive_single_class_rate(b, seed=seed)
        rates[b] = (rate, analytic)
        worst_dev = max(worst_dev, abs(rate - analytic) / analytic)
    ok = bad == 0 and worst_dev <= 0.2
    detail = f"{bad} single-class batches in {n_plans} plans; naive rates " + ", ".join(
        f"b={b}: {r:.4f} vs {a:.4f}" for b, (r, a) in rates.items())
    return SuiteResult("batch-balance", ok, worst_dev, detail, time.perf_counter() - t0,
                       {"single_class": bad, "rates": rates})


# ---------------------------------------------------------------- gradients


def _tiny(layers, shape=(1, 6, 6, 6), seed=0):
    net = Network(layers + [SoftmaxOutput()], shape, rng_seed=seed, name="tiny")
    return init_params(net, seed)


def layer_probe_networks(seed=0):
    """One small network per layer kind, input 1x6^3, exercising that kind's backward."""
    flat = 2 * 3 ** 3
    return {
        "conv3d": _tiny([Conv3D(1, 2, 3, 2, 1), Flatten(), Dense(flat, 2)], seed=seed),
        "batchnorm": _tiny([Conv3D(1, 2, 3, 2, 1), BatchNorm(2), Flatten(), Dense(flat, 3), BatchNorm(3)], seed=seed),
        "relu": _tiny([Conv3D(1, 2, 3, 2, 1), ReLU(), Flatten(), Dense(flat, 2)], seed=seed),
        "maxpool3d": _tiny([Conv3D(1, 2, 3, 1, 1), MaxPool3D(2, 2), Flatten(), Dense(flat, 2)], seed=seed),
        "dense": _tiny([Flatten(), Dense(216, 4), Dense(4, 2)], seed=seed),
        "dropout": _tiny([Flatten(), Dense(216, 6), Dropout(0.5), Dense(6, 2)], seed=seed),
        "flatten": _tiny([Conv3D(1, 1, 3, 2, 1), Flatten(), Dense(27, 2)], seed=seed),
        "voxres_block": _tiny([Conv3D(1, 2, 3, 2, 1), VoxResBlock(2), Flatten(), Dense(flat, 2)], seed=seed),
        "softmax_output": _tiny([Flatten(), Dense(216, 3)], seed=seed),
    }


def architecture_probe_networks(seed=0, cube=12):
    return {
        "voxcnn": build_voxcnn(cube=cube, seed=seed),
        "voxresnet": build_voxresnet(cube=cube, seed=seed),
    }


def _layer_groups(params):
    groups = {}
    for name in params:
        groups.setdefault(name.rsplit(".", 1)[0], []).append(name)
    return groups


def _walk(layers):
    for layer in layers:
        yield layer
        yield from _walk(layer.children())


def kink_pattern(net):
    """Active-set signature of the last train-mode forward: ReLU signs and max-pool argmaxes."""
    parts = []
    for layer in _walk(net.layers):
        if isinstance(layer, ReLU):
            parts.append(np.packbits(layer.cache > 0).tobytes())
        elif isinstance(layer, MaxPool3D):
            parts.append(layer.cache[0].tobytes())
    return b"|".join(parts)


def grad_ok(analytic, numeric):
    if max(abs(analytic), abs(numeric)) < GRAD_SMALL:
        return abs(analytic - numeric) <= GRAD_ATOL
    return abs(analytic - numeric) <= GRAD_RTOL * max(abs(analytic), abs(numeric))


def grad_dev(analytic, numeric):
    """Deviation normalised so that 1.0 sits exactly at the pass/fail boundary."""
    if max(abs(analytic), abs(numeric)) < GRAD_SMALL:
        return abs(analytic - numeric) / GRAD_ATOL
    return abs(analytic - numeric) / (GRAD_RTOL * max(abs(analytic), abs(numeric)))


def gradcheck(net, x, labels, per_layer=20, h=FD_STEP, seed=0, check_input=True):
    """Compare backward() against central differences in float64.

    Entries are drawn in random order per layer until ``per_layer`` valid ones
    are found. An entry is invalid when the +-h perturbation changes a ReLU
    sign or a max-pool argmax anywhere in the network: the loss is not smooth
    across that step, so a difference quotient says nothing about the
    derivative there. The dropout stream is reseeded before each evaluation.

    Returns ``(checks, skipped)``; ``checks`` holds
    ``(name, flat_index, analytic, numeric, ok)`` tuples.
    """
    net = net.copy().astype(np.float64)
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mask_seed = int(rng.integers(2**31))

    def loss():
        net.reseed(mask_seed)
        net.forward(x, mode="train")
        return net.loss(labels), kink_pattern(net)

    _, base_pattern = loss()
    grads = {k: v.copy() for k, v in net.backward(labels).items()}
    gin = net.input_grad.copy()
    params = net.parameters()

    def probe(flat, i, analytic, name):
        old = flat[i]
        flat[i] = old + h
        up, pu = loss()
        flat[i] = old - h
        down, pd = loss()
        flat[i] = old
        if pu != base_pattern or pd != base_pattern:
            return None
        num = (up - down) / (2 * h)
        return (name, int(i), analytic, num, grad_ok(analytic, num))

    groups = [[(name, i) for name in names for i in range(params[name].size)]
              for names in _layer_groups(params).values()]
    if check_input:
        groups.append([("input", i) for i in range(x.size)])
    checks, skipped = [], 0
    for entries in groups:
        found = 0
        for t in rng.permutation(len(entries)):
            if found == per_layer:
                break
            name, i = entries[t]
            if name == "input":
                res = probe(x.reshape(-1), i, float(gin.reshape(-1)[i]), name)
            else:
                res = probe(params[name].reshape(-1), i, float(grads[name].reshape(-1)[i]), name)
            if res is None:
                skipped += 1
            else:
                checks.append(res)
                found += 1
    return checks, skipped


def gradcheck_suite(seeds=(0,), per_layer=20, probes=("layers", "architectures"), layer_batch=4, arch_batch=2):
    """Finite-difference agreement for every layer kind and both architectures.

    Layer probes (input 1x6^3) use the coarse step ``FD_STEP``; the full
    architectures (input 1x12^3) are deep enough that any coarse step crosses
    activation kinks, so they use ``ARCH_FD_STEP``.
    """
    t0 = time.perf_counter()
    failures = []
    worst = 0.0
    checked = skipped = 0
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        cases = []
        if "layers" in probes:
            cases += [(k, n, FD_STEP, layer_batch) for k, n in layer_probe_networks(seed).items()]
        if "architectures" in probes:
            cases += [(k, n, ARCH_FD_STEP, arch_batch) for k, n in architecture_probe_networks(seed).items()]
        for kind, net, h, batch in cases:
            x = rng.random((batch,) + net.input_shape)
            labels = rng.integers(0, net.num_classes, batch)
            labels[0], labels[-1] = 0, 1
            checks, skip = gradcheck(net, x, labels, per_layer, h=h, seed=seed)
            skipped += skip
            for name, i, ana, num, ok in checks:
                checked += 1
                worst = max(worst, grad_dev(ana, num))
                if not ok:
                    failures.append(f"{kind}:{name}[{i}] analytic={ana:.6g} numeric={num:.6g}")
    detail = f"{checked} entries, {len(failures)} failures, {skipped} kink-crossing skips (1.0 = tolerance edge)"
    if failures:
        detail += "; " + "; ".join(failures[:5])
    return SuiteResult("gradcheck", not failures, worst, detail, time.perf_counter() - t0,
                       {"failures": failures, "checked": checked, "skipped": skipped})


SUITES = {
    "gradcheck": gradcheck_suite,
    "conv-oracle": conv_oracle_suite,
    "auc-oracle": auc_oracle_suite,
    "batch-balance": batch_balance_suite,
}


def run_suites(names):
    if "all" in names:
        names = list(SUITES)
    return [SUITES[name]() for name in names]
