"""Oracle and gradient verification suite behind ``deunet check``.

Each criterion function returns a list of ``Result`` rows. The reference
paths come from :mod:`deunet.oracles` or are composed directly from
primitives, never from the code under test.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import deform, oracles, tensor
from .archive import decode_archive, encode_archive
from .dgpa import DGPABlock, channel_attention_forward
from .errors import ParseError
from .metrics import assd, dice, hausdorff
from .network import DeUNet, NetConfig
from .params import ModelParams, decode_checkpoint, encode_checkpoint
from .phantom import PhantomSpec, generate_phantom
from .tensor import check_gradient
from .training import Adam, EarlyStopping, cross_entropy, kfold_split


@dataclass
class Result:
    name: str
    ok: bool
    detail: str = ""

    def line(self):
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


def _fb(fwd, bwd, n_out=None):
    """Adapt a forward/backward pair to the ``check_gradient`` callback shape."""
    def f(*args):
        y, cache = fwd(*args)

        def back(g):
            grads = bwd(g, cache)
            if not isinstance(grads, tuple):
                grads = (grads,)
            return grads[:n_out] if n_out else grads
        return y, back
    return f


# ---------------------------------------------------------------- criterion 1

def zero_offset_equivalence(cases=50):
    t0 = time.time()
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        clip = rng.standard_normal((3, 16, 16))
        w = rng.standard_normal((4, 3, 3, 3))
        fused = deform.temporal_deform_agg_conv(clip, np.zeros((54, 16, 16)), w)
        early = tensor.conv2d(clip, w, None, 1, 1)
        worst = max(worst, float(np.abs(fused - early).max()))
    dt = time.time() - t0
    return [Result("zero-offset TDAM == early fusion", worst < 1e-10 and dt < 10,
                   f"max abs err {worst:.2e} over {cases} cases in {dt:.2f}s")]


# ---------------------------------------------------------------- criterion 2

def lattice_free(rng, shape, low=-2, high=2):
    """Random coordinates whose fractional parts lie in [0.1, 0.9]."""
    return rng.integers(low, high, shape) + rng.uniform(0.1, 0.9, shape)


def _primitive_cases(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    yield "conv2d", _fb(lambda x, w, b: tensor.conv2d_forward(x, w, b, 1, 1), tensor.conv2d_backward), [x, w, b]
    yield "conv2d stride 2", _fb(lambda x, w: tensor.conv2d_forward(x, w, None, 2, 1),
                                 tensor.conv2d_backward, 2), [x, w]
    yield "deconv2d", _fb(lambda x, w, b: tensor.deconv2d_forward(x, w, b, 2), tensor.deconv2d_backward), \
        [rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3)]
    yield "maxpool routing", _fb(lambda x: tensor.maxpool2d_forward(x, 2), tensor.maxpool2d_backward), \
        [rng.standard_normal((4, 8, 8))]
    yield "softmax_rows", _fb(tensor.softmax_rows_forward, tensor.softmax_rows_backward), \
        [rng.standard_normal((3, 4))]
    yield "matmul", _fb(tensor.matmul_forward, tensor.matmul_backward), \
        [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))]
    feat = rng.standard_normal((5, 6))
    yx = lattice_free(rng, 2, -1, 5)

    def bil(feat, yx):
        out = np.array([deform.bilinear_sample(feat, yx[0], yx[1])])

        def back(g):
            df, gy, gx = deform.bilinear_sample_grad(feat, yx[0], yx[1])
            return df * g[0], np.array([gy, gx]) * g[0]
        return out, back
    yield "bilinear_sample", bil, [feat, yx]
    yield "deform_conv2d", _fb(deform.deform_conv2d_forward, deform.deform_conv2d_backward), \
        [rng.standard_normal((3, 6, 6)), lattice_free(rng, (18, 6, 6)),
         rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)]
    yield "temporal_deform_agg_conv", _fb(deform.temporal_deform_agg_conv_forward,
                                          deform.temporal_deform_agg_conv_backward), \
        [rng.standard_normal((3, 6, 6)), lattice_free(rng, (54, 6, 6)), rng.standard_normal((2, 3, 3, 3))]


def randomize(params, rng, scale=1.0):
    """Give every parameter (offset heads and alpha included) a random value.

    Kernels get fan-in scaled draws so activations stay O(1); biases and
    alpha get ``0.3 * scale``.
    """
    for p in params.values():
        std = scale * np.sqrt(2.0 / np.prod(p.shape[1:])) if p.value.ndim >= 2 else 0.3 * scale
        p.value = np.asarray(rng.standard_normal(p.shape) * std)


def off_lattice(params, rng, spread=0.1):
    """Pin every offset head near a random non-integer offset.

    Sample points then stay inside one lattice cell under FD perturbations,
    so the piecewise-bilinear kinks are never crossed.
    """
    for name, p in params.items():
        if name.endswith(("offset.weight", "offset_net.head.weight")):
            p.value = rng.standard_normal(p.shape) * spread / np.sqrt(np.prod(p.shape[1:]))
        elif name.endswith(("offset.bias", "offset_net.head.bias")):
            p.value = rng.uniform(0.3, 0.7, p.shape) * rng.choice([-1.0, 1.0], p.shape)


def param_check_fn(params, forward, backward):
    """``check_gradient`` callback over every parameter value of ``params``."""
    names = list(params)

    def f(*values):
        for n, v in zip(names, values):
            params[n].value = v
        y = forward()

        def back(g):
            params.zero_grad()
            backward(g)
            return [params[n].grad for n in names]
        return y, back
    return f, [params[n].value.copy() for n in names]


def dgpa_case(rng, N=4, H=6, W=6):
    params = ModelParams()
    block = DGPABlock(params, "dgpa", N)
    # affinity logits sum over all H*W positions; keep them O(1) so the softmax is not saturated
    randomize(params, rng, 0.5)
    off_lattice(params, rng)
    x = rng.standard_normal((N, H, W)) * 0.5

    def f(x, *values):
        for n, v in zip(params, values):
            params[n].value = v
        y = block.forward(x)

        def back(g):
            params.zero_grad()
            dx = block.backward(g)
            return [dx] + [params[n].grad for n in params]
        return y, back
    return f, [x] + [p.value.copy() for p in params.values()]


def network_case(rng, size=16, cfg=None):
    cfg = cfg or NetConfig(tdam_channels=4, offset_depth=2, offset_base_channels=4, depth=2, base_channels=4)
    net = DeUNet(cfg, "full", seed=int(rng.integers(1 << 30)))
    randomize(net.params, rng)
    off_lattice(net.params, rng)
    for name, p in net.params.items():
        if name.endswith(("query_b.weight", "key_c.weight")):
            p.value *= 0.3  # keeps the bottleneck affinity softmax out of saturation
    clip = rng.standard_normal((cfg.T, size, size))
    return param_check_fn(net.params, lambda: net.forward(clip), net.backward)


def gradient_suite(seeds=20, network_seeds=20):
    t0 = time.time()
    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, f, inputs in _primitive_cases(rng):
            worst[name] = max(worst.get(name, 0.0), check_gradient(f, inputs, 1e-5, seed=seed))
        f, inputs = dgpa_case(rng)
        worst["dgpa_block"] = max(worst.get("dgpa_block", 0.0),
                                  check_gradient(f, inputs, 1e-5, seed=seed, max_components=12))
        logits, gt = rng.standard_normal((4, 4, 4)), rng.integers(0, 4, (4, 4))
        f = lambda z: (lambda l, g: (np.array([l]), lambda u: (g * u[0],)))(*cross_entropy(z, gt))
        worst["loss"] = max(worst.get("loss", 0.0), check_gradient(f, [logits], 1e-6, seed=seed))
    for seed in range(network_seeds):
        f, inputs = network_case(np.random.default_rng(2000 + seed))
        worst["full network 16x16"] = max(worst.get("full network 16x16", 0.0),
                                          check_gradient(f, inputs, 3e-6, seed=seed, max_components=2,
                                                         refine_kinks=True))
    dt = time.time() - t0
    limits = {"dgpa_block": 1e-3, "full network 16x16": 1e-3, "loss": 1e-6}
    rows = [Result(f"gradient {name}", err < limits.get(name, 1e-4),
                   f"max rel err {err:.2e} (limit {limits.get(name, 1e-4):.0e})") for name, err in worst.items()]
    rows.append(Result("gradient suite runtime", dt < 300, f"{dt:.1f}s"))
    return rows


# ---------------------------------------------------------------- criterion 3

def dgpa_reference(x, params, name="dgpa"):
    """Block output rebuilt from loop oracles: deformable conv, 1x1 projections, attention."""
    v = {n: p.value for n, p in params.items()}
    N, H, W = x.shape
    off = oracles.conv2d_direct(x, v[f"{name}.deform.offset.weight"], v[f"{name}.deform.offset.bias"], 1, 1)
    O = oracles.deform_conv_loops(x, off, v[f"{name}.deform.weight"]) + v[f"{name}.deform.bias"][:, None, None]
    proj = [oracles.conv2d_direct(O, v[f"{name}.{k}.weight"], v[f"{name}.{k}.bias"]).reshape(N, H * W)
            for k in ("query_b", "key_c", "value_d")]
    Z = oracles.channel_attention_loops(*proj, float(v[f"{name}.alpha"]), O.reshape(N, H * W))
    return Z.reshape(N, H, W)


def attention_contracts(cases=20):
    rows = []
    worst_row = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(3000 + seed)
        Bm, Cm, Dm = (rng.standard_normal((5, 30)) * 3 for _ in range(3))
        _, (_, P, _) = channel_attention_forward(Bm, Cm, Dm)
        worst_row = max(worst_row, float(np.abs(P.sum(axis=1) - 1).max()))
    rows.append(Result("affinity rows sum to 1", worst_row < 1e-6 and bool(np.all(P >= 0)),
                       f"max |row sum - 1| {worst_row:.2e}"))

    exact = True
    for seed in range(cases):
        rng = np.random.default_rng(3100 + seed)
        params = ModelParams()
        block = DGPABlock(params, "dgpa", 4)
        randomize(params, rng)
        params["dgpa.alpha"].value = np.zeros(())
        z = block.forward(rng.standard_normal((4, 6, 6)))
        exact &= bool(np.array_equal(z, block.state.O))
    rows.append(Result("alpha=0 => Z == O exactly", exact, f"{cases} random blocks"))

    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(3200 + seed)
        params = ModelParams()
        block = DGPABlock(params, "dgpa", 4)
        randomize(params, rng)
        x = rng.standard_normal((4, 6, 6))
        worst = max(worst, float(np.abs(block.forward(x) - dgpa_reference(x, params)).max()))
    rows.append(Result("dgpa_block == double-loop oracle", worst < 1e-10, f"max abs err {worst:.2e}"))
    return rows


# ---------------------------------------------------------------- criterion 4

def plain_seg_reference(fused, params, depth=2, S=3):
    """Segmentation U-Net with every deformable conv read as a plain conv and alpha dropped, from primitives."""
    v = {n: p.value for n, p in params.items()}
    pad = (S - 1) // 2

    def conv(x, name, relu=True, padding=1):
        y = tensor.conv2d(x, v[f"{name}.weight"], v[f"{name}.bias"], 1, padding)
        return np.maximum(y, 0) if relu else y

    x = fused
    skips = []
    for level in range(depth):
        x = conv(x, f"seg_unet.enc{level}.conv1", padding=pad)
        x = conv(x, f"seg_unet.enc{level}.conv2")
        skips.append(x)
        x, _ = tensor.maxpool2d(x, 2)
    x = conv(x, "seg_unet.bottleneck.conv")
    x = conv(x, "seg_unet.bottleneck.dgpa.deform", relu=False, padding=pad)
    for level in reversed(range(depth)):
        up = tensor.deconv2d(x, v[f"seg_unet.up{level}.weight"], v[f"seg_unet.up{level}.bias"], 2)
        x = np.concatenate([up, skips[level]], axis=0)
        x = conv(x, f"seg_unet.dec{level}.conv1")
        x = conv(x, f"seg_unet.dec{level}.conv2")
    return conv(x, "seg_unet.head", relu=False, padding=0)


def composed_baseline(clip, params, cfg):
    """Early fusion followed by :func:`plain_seg_reference`."""
    fused = tensor.conv2d(clip, params["tdam.weight"].value, None, 1, (cfg.S - 1) // 2)
    return plain_seg_reference(fused, params, cfg.depth, cfg.S)


def init_equivalence(cases=10, size=32):
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(4000 + seed)
        cfg = NetConfig(tdam_channels=4, offset_base_channels=4, base_channels=4)
        net = DeUNet(cfg, "full", seed=seed)
        for n, p in net.params.items():
            if ".offset." in n or n.startswith("offset_net.head") or n.endswith("alpha"):
                continue  # keep the zero-initialized offset heads and alpha
            p.value = rng.standard_normal(p.shape) * 0.3
        clip = rng.standard_normal((3, size, size))
        worst = max(worst, float(np.abs(net.forward(clip) - composed_baseline(clip, net.params, cfg)).max()))
    return [Result("init full net == early fusion + plain U-Net", worst < 1e-8,
                   f"max abs err {worst:.2e} over {cases} clips")]


# ---------------------------------------------------------------- criterion 5

def random_mask_pair(rng, size=16):
    out = []
    for _ in range(2):
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), rng.uniform(0.8, 2.0))
        q = np.quantile(field, np.sort(rng.uniform(0.2, 0.95, 3)))
        out.append(np.digitize(field, q).astype(np.uint8))
    return out


def metric_oracles(pairs=100):
    mismatches = 0
    for seed in range(pairs):
        pred, gt = random_mask_pair(np.random.default_rng(5000 + seed))
        for c in (1, 2, 3):
            got = (dice(pred, gt, c), hausdorff(pred, gt, c), assd(pred, gt, c))
            ref = (oracles.dice_counts(pred, gt, c), oracles.hausdorff_pairwise(pred, gt, c),
                   oracles.assd_pairwise(pred, gt, c))
            for a, b in zip(got, ref):
                if not (a == b or (math.isnan(a) and math.isnan(b))):
                    mismatches += 1
    rows = [Result("metrics == brute-force oracles", mismatches == 0,
                   f"{mismatches} mismatches over {pairs} pairs x 3 classes x 3 metrics")]
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 3:6] = 3
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    hand = (dice(m, m, 3) == 1.0 and hausdorff(m, m, 3) == 0.0 and assd(m, m, 3) == 0.0
            and hausdorff(a, b, 1) == 5.0 and assd(a, b, 1) == 5.0)
    rows.append(Result("metric hand cases", hand, "identical -> 1/0/0; 3-4-5 pixels -> HD 5, ASSD 5"))
    return rows


# ---------------------------------------------------------------- criterion 7

def protocol_fidelity():
    rows = []
    ok = True
    for patience in (0, 1, 3, 20):
        scores = [0.1, 0.5, 0.4] + [0.45] * 40
        stop_at = None
        es = EarlyStopping(patience)
        for epoch, s in enumerate(scores, 1):
            if es.update(epoch, s)[1]:
                stop_at = epoch
                break
        expected = 1 if patience == 0 else 2 + patience
        ok &= stop_at == expected
    rows.append(Result("early stopping after patience non-improving epochs", ok, "patience 0/1/3/20"))

    clips = generate_phantom(PhantomSpec(size=16, n_clips=20, clips_per_subject=2), seed=0)
    splits = kfold_split(clips, 5, seed=3)
    seen = np.concatenate([v for _, v in splits])
    subj = np.array([c.subject for c in clips])
    grouped = all(not set(subj[t]) & set(subj[v]) for t, v in splits)
    sizes = [len(set(subj[v])) for _, v in splits]
    ok = (sorted(seen.tolist()) == list(range(len(clips))) and grouped and max(sizes) - min(sizes) <= 1
          and all(np.array_equal(a[1], b[1]) for a, b in zip(splits, kfold_split(clips, 5, seed=3))))
    rows.append(Result("5-fold splits disjoint, exhaustive, subject-grouped", ok, f"subjects per fold {sizes}"))

    worst = 0.0
    for g, wd in ((0.3, 0.0), (-1.7, 1e-4), (2e-3, 0.1)):
        params = ModelParams()
        params.add(tensor.Parameter("theta", np.array(0.75)))
        opt = Adam(params, lr=1e-2, weight_decay=wd)
        ref = oracles.adam_scalar(0.75, [g] * 50, 1e-2, wd)
        for step in range(50):
            params.zero_grad()
            params["theta"].grad += g
            params.grads_ready = True
            opt.step()
            worst = max(worst, abs(float(params["theta"].value) - ref[step]))
    rows.append(Result("Adam scalar recurrence", worst < 1e-12, f"max abs err {worst:.2e}"))
    return rows


# ---------------------------------------------------------------- criterion 8

def _rejects(decode, data):
    try:
        decode(data)
    except ParseError:
        return True
    return False


def format_robustness():
    rows = []
    clips = generate_phantom(PhantomSpec(size=16, n_clips=6, clips_per_subject=3), seed=1)
    raw = encode_archive(clips)
    rows.append(Result("archive round-trip byte-exact", encode_archive(decode_archive(raw)) == raw,
                       f"{len(raw)} bytes"))
    bad = [i for i in range(16) for delta in (1, 0x80) if not _rejects(decode_archive, _flip(raw, i, delta))]
    rows.append(Result("archive header corruption rejected", not bad, f"unrejected offsets {bad}"))

    net = DeUNet(NetConfig(tdam_channels=2, offset_base_channels=2, base_channels=2), "full", dtype=np.float32)
    ck = encode_checkpoint(net.params.state(), net.meta())
    state, meta = decode_checkpoint(ck)
    same = encode_checkpoint(state, meta) == ck and all(
        np.array_equal(state[n], p.value) for n, p in net.params.items())
    rows.append(Result("checkpoint round-trip byte-exact", same, f"{len(ck)} bytes, {len(state)} tensors"))
    first_param_end = 8 + 4 + len(next(iter(state)).encode()) + 4
    head = range(first_param_end + 4 * next(iter(state.values())).ndim)
    bad = [i for i in head for delta in (1, 0x80) if not _rejects(decode_checkpoint, _flip(ck, i, delta))]
    rows.append(Result("checkpoint header corruption rejected", not bad, f"unrejected offsets {bad}"))
    return rows


def _flip(buf, i, delta):
    b = bytearray(buf)
    b[i] = (b[i] + delta) % 256
    return bytes(b)


CRITERIA = [
    ("1 zero-offset equivalence", zero_offset_equivalence),
    ("2 gradient suite", gradient_suite),
    ("3 attention contracts", attention_contracts),
    ("4 initialization equivalence", init_equivalence),
    ("5 metric oracles", metric_oracles),
    ("7 protocol fidelity", protocol_fidelity),
    ("8 format robustness", format_robustness),
]


def run_all(out=print):
    all_ok = True
    for title, fn in CRITERIA:
        out(f"== {title}")
        for r in fn():
            out(r.line())
            all_ok &= r.ok
    return all_ok
