"""Built-in sanity suite: gradient checks and oracle comparisons.

Runs a compressed version of the test-suite oracles so a fresh install
can verify itself without pytest. Prints one line per check.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ModelConfig
from .encoder import inverse_transform_sample, stratified_u
from .evaluation import average_precision, tiou
from .heads import giou_1d
from .inference import Detection, soft_nms


def _check(name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] {name}{suffix}")
    return ok


def _conv_oracle(rng) -> bool:
    x = rng.normal(size=(10, 3))
    w = rng.normal(size=(3, 3, 2))
    out = ad.conv1d(Tensor(x), Tensor(w), stride=1, padding=1).data
    ref = np.zeros_like(out)
    xp = np.pad(x, ((1, 1), (0, 0)))
    for t in range(ref.shape[0]):
        for o in range(2):
            ref[t, o] = (xp[t:t + 3] * w[:, :, o]).sum()
    return np.allclose(out, ref, atol=1e-12)


def _gradient_check(rng) -> float:
    w = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    gain = Tensor(np.ones(4), requires_grad=True)
    bias = Tensor(np.zeros(4), requires_grad=True)

    def fn(x):
        h = ad.conv1d(x, w, stride=1, padding=1)
        h = ad.layer_norm(h, gain, bias)
        h = ad.softmax(ad.relu(h), axis=-1)
        return (h * h).sum()

    return ad.grad_check(fn, Tensor(rng.normal(size=(6, 4))), eps=1e-5)


def _bfs_oracle(rng) -> bool:
    from .backbone import PyramidLevel
    from .background import sample_background

    feats = rng.normal(size=(16, 4))
    segments = np.stack([rng.uniform(0, 8, 16), rng.uniform(8, 16, 16)], axis=1)
    level = PyramidLevel(level=1, features=Tensor(feats), stride=1)
    got = sample_background(level, segments, 0.7).data
    ref = np.zeros((16, 8))
    for i, (s, e) in enumerate(segments):
        a, b = int(round(0.7 * s)), int(round(s))
        c, d = int(round(e)), int(round(e + 0.7 * (16 - e)))
        if b > a:
            ref[i, :4] = feats[a:b].max(axis=0)
        if d > c:
            ref[i, 4:] = feats[c:d].max(axis=0)
    return np.array_equal(got, ref)


def _soft_nms_oracle(rng) -> bool:
    dets = [Detection(start=float(s), end=float(s + w), class_id=int(c), score=float(p))
            for s, w, c, p in zip(rng.uniform(0, 30, 40), rng.uniform(1, 10, 40),
                                  rng.integers(0, 3, 40), rng.uniform(0.05, 1.0, 40))]
    got = soft_nms(dets, sigma=0.5, final_threshold=1e-3)
    # quadratic reference
    ref = []
    for cls in sorted({d.class_id for d in dets}):
        pool = [[d.score, d] for d in dets if d.class_id == cls]
        while pool:
            i = max(range(len(pool)), key=lambda j: (pool[j][0], -pool[j][1].start))
            score, best = pool.pop(i)
            if score < 1e-3:
                break
            ref.append(Detection(best.start, best.end, best.class_id, score))
            kept = []
            for s, d in pool:
                ov = tiou((best.start, best.end), (d.start, d.end))
                s2 = s * math.exp(-(ov * ov) / 0.5)
                if s2 >= 1e-3:
                    kept.append([s2, d])
            pool = kept
    ref.sort(key=lambda d: (-d.score, d.start, d.end, d.class_id))
    return got == ref


def _sampling_frequencies(rng) -> bool:
    pdf = rng.dirichlet(np.ones(6))
    draws = 100_000
    u = np.sort(rng.random(draws))
    idx = inverse_transform_sample(pdf, draws, u)
    counts = np.bincount(idx, minlength=6)
    sigma = np.sqrt(draws * pdf * (1 - pdf))
    return bool(np.all(np.abs(counts - draws * pdf) <= 3 * sigma + 1))


def run_selftest() -> bool:
    rng = np.random.default_rng(42)
    ok = True
    ok &= _check("conv1d vs sliding-window oracle", _conv_oracle(rng))

    err = _gradient_check(rng)
    ok &= _check("composite gradient check", err <= 1e-6, f"max rel err {err:.2e}")

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum() * 0.5
    tape.backward(loss)
    ok &= _check("quadratic backward", np.allclose(x.grad, [1.0, 2.0]))

    ok &= _check("background sampling vs naive oracle", _bfs_oracle(rng))
    ok &= _check("soft-nms vs quadratic reference", _soft_nms_oracle(rng))

    uniform = np.full(8, 1 / 8)
    got = inverse_transform_sample(uniform, 4, stratified_u(4))
    ok &= _check("stratified inverse-CDF sampling", list(got) == [0, 2, 4, 6])
    ok &= _check("inverse-CDF empirical frequencies", _sampling_frequencies(rng))

    ok &= _check("tiou fixture", abs(tiou((0, 10), (5, 15)) - 5 / 15) < 1e-12)
    dets = {"v": [Detection(20, 30, 0, 0.9), Detection(0, 10, 0, 0.8)]}
    gts = {"v": [(0.0, 10.0, 0)]}
    ok &= _check("average-precision fixture",
                 abs(average_precision(dets, gts, 0.5) - 0.5) < 1e-12)
    ok &= _check("giou fixtures",
                 abs(giou_1d((0, 2), (4, 6)) + 1 / 3) < 1e-12
                 and abs(giou_1d((2, 4), (0, 8)) - 0.25) < 1e-12)

    model = ModelConfig(levels=2, channels=8, num_classes=2, heads=1)
    ok &= _check("config construction", model.scale(1) == 2.0)
    print("selftest:", "all checks passed" if ok else "FAILURES above")
    return bool(ok)
