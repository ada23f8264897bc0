"""Independent oracles shared by the unit tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from agfv.layers import LayerSpec, layer_backward, layer_forward, param_shapes
from agfv.network import ModelParams, NetworkConfig, embedding_config, init_params
from agfv.siamese import contrastive_loss, pair_loss_and_grads, split_layers
from agfv.tensor import finite_diff_grad, rel_error

GRAD_TOL_64 = 1e-6


# -- per-layer gradient check ----------------------------------------------


def _away_from_zero(x, gap=0.05):
    # keep relu / maxpool inputs off their kinks so central differences are exact to O(h^2)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def random_layer_case(kind: str, rng: np.random.Generator):
    """A small random (spec, batch input, params, inject) instance of one layer kind."""
    n = int(rng.integers(1, 4))
    inject = None
    p = {}
    if kind == "conv":
        c = int(rng.integers(1, 4))
        side = int(rng.integers(4, 8))
        spec = LayerSpec(
            "conv", "c", out_channels=int(rng.integers(1, 4)), kernel=int(rng.integers(1, 4)),
            stride=int(rng.integers(1, 3)), pad=int(rng.integers(0, 2)),
        )
        x = rng.normal(size=(n, c, side, side))
    elif kind == "maxpool":
        window = int(rng.integers(2, 4))
        spec = LayerSpec("maxpool", "p", window=window, stride=int(rng.integers(1, window + 1)))
        side = int(rng.integers(window, 8))
        # distinct values per window: a random permutation scaled up
        x = rng.permutation(n * 2 * side * side).reshape(n, 2, side, side) * 0.1 + rng.normal(size=(n, 2, side, side)) * 1e-3
    elif kind == "relu":
        spec = LayerSpec("relu", "r")
        x = _away_from_zero(rng.normal(size=(n, int(rng.integers(2, 9)))))
    elif kind == "lrn":
        spec = LayerSpec(
            "lrn", "l", lrn_k=float(rng.uniform(0.5, 2.5)), lrn_n=int(rng.integers(1, 7)),
            lrn_alpha=float(rng.uniform(0.05, 0.5)), lrn_beta=float(rng.uniform(0.3, 0.9)),
        )
        x = rng.normal(size=(n, int(rng.integers(2, 8)), 3, 3))
    elif kind == "fully_connected":
        spec = LayerSpec("fully_connected", "f", width=int(rng.integers(1, 6)))
        x = rng.normal(size=(n, int(rng.integers(1, 3)), 2, 2)) if rng.random() < 0.5 else rng.normal(size=(n, 5))
    elif kind == "dropout":
        spec = LayerSpec("dropout", "d", rate=float(rng.uniform(0.0, 0.9)))
        x = rng.normal(size=(n, int(rng.integers(1, 9))))
    elif kind == "l2norm":
        spec = LayerSpec("l2norm", "e")
        x = rng.normal(size=(n, int(rng.integers(2, 9))))
    elif kind == "concat_inject":
        width = int(rng.integers(0, 4))
        spec = LayerSpec("concat_inject", "inject", width=width)
        x = rng.normal(size=(n, int(rng.integers(1, 7))))
        inject = rng.normal(size=(n, width))
    else:
        raise ValueError(kind)
    for key, shp in param_shapes(spec, x.shape[1:]).items():
        p[key] = rng.normal(size=shp)
    return spec, x, p, inject


def layer_gradcheck(spec, x, p, inject, rng, h=1e-5) -> float:
    """Worst norm-wise relative error of analytic vs central-difference gradients.

    The scalar checked is sum(G * y) for a fixed random G, in eval mode.
    """
    y, _ = layer_forward(spec, p, x, False, None, inject)
    G = rng.normal(size=y.shape)

    def loss():
        out, _ = layer_forward(spec, p, x, False, None, inject)
        return float(np.sum(G * out))

    _, cache = layer_forward(spec, p, x, False, None, inject)
    dx, dp = layer_backward(spec, p, cache, G)
    worst = rel_error(dx, finite_diff_grad(lambda _: loss(), x, h))
    for key in p:
        worst = max(worst, rel_error(dp[key], finite_diff_grad(lambda _: loss(), p[key], h)))
    return worst


def contrastive_gradcheck(rng, h=1e-6) -> float:
    margin = float(rng.uniform(0.3, 2.0))
    y = int(rng.integers(0, 2))
    D = float(rng.uniform(0.01, 2.0))
    if abs(D - margin) < 0.01:
        D = margin + 0.05
    _, g = contrastive_loss(D, y, margin)
    arr = np.array([D])
    fd = finite_diff_grad(lambda a: contrastive_loss(float(a[0]), y, margin)[0], arr, h)
    return rel_error(np.array([g]), fd)


# -- tiny Siamese network for end-to-end gradient checks -------------------


def tiny_network(inject_width: int = 0) -> NetworkConfig:
    base = NetworkConfig(
        8,
        (
            LayerSpec("conv", "conv1", out_channels=2, kernel=3, pad=1),
            LayerSpec("relu", "relu1"),
            LayerSpec("lrn", "lrn1", lrn_alpha=0.1),
            LayerSpec("maxpool", "pool1", window=2, stride=2),
            LayerSpec("fully_connected", "fc6", width=5),
            LayerSpec("relu", "relu6"),
            LayerSpec("dropout", "drop6", rate=0.2),
            LayerSpec("fully_connected", "fc7", width=4),
            LayerSpec("relu", "relu7"),
            LayerSpec("dropout", "drop7", rate=0.2),
            LayerSpec("fully_connected", "fc8", width=3),
        ),
        name="tiny",
    )
    return embedding_config(base, inject_width)


def siamese_gradcheck(rng, inject_width: int, h=1e-5) -> float:
    net = tiny_network(inject_width)
    seg = split_layers(net)
    ia = np.array([0, 1, 2, 0])
    ib = np.array([1, 2, 3, 3])
    labels = np.array([1, 0, 1, 0])
    # redraw instances whose relus are mostly dead: their gradients sit at the
    # finite-difference noise floor and the relative error measures roundoff only
    while True:
        params = init_params(net, rng)
        for v in params.weights.values():
            v += rng.normal(scale=0.1, size=v.shape)
        feats = rng.uniform(0, 1, size=(4, 1, 8, 8))
        z = rng.normal(size=(4, inject_width)) if inject_width else None
        _, grads, D = pair_loss_and_grads(seg, params, feats, ia, ib, labels, z, 2.5)
        if D.min() > 0.05 and min(np.linalg.norm(g) for g in grads.values()) > 1e-3:
            break

    def loss(_):
        return pair_loss_and_grads(seg, params, feats, ia, ib, labels, z, 2.5)[0]

    worst = 0.0
    for key, w in params.weights.items():
        worst = max(worst, rel_error(grads[key], finite_diff_grad(loss, w, h)))
    return worst


# -- ranking oracles --------------------------------------------------------


def mann_whitney_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), by comparing every pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def count_accuracy(scores, labels, threshold, distance=True) -> float:
    correct = 0
    for s, y in zip(scores, labels):
        decided = (s <= threshold) if distance else (s >= threshold)
        correct += int(decided) == y
    return correct / len(scores)


def tally_confusion(decisions, labels):
    counts = [[0, 0], [0, 0]]
    for d, y in zip(decisions, labels):
        counts[y][d] += 1
    return [[c / sum(row) for c in row] for row in counts]


def dot_centroid(img: np.ndarray) -> tuple[float, float]:
    w = np.clip(img, 0, None)
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    total = w.sum()
    return float((xs * w).sum() / total), float((ys * w).sum() / total)


def random_params(cfg: NetworkConfig, seed: int, precision="float64") -> ModelParams:
    return init_params(cfg, np.random.default_rng(seed), precision)


# -- alignment geometry -----------------------------------------------------


def distorted_eye_image(rng, side=64, canvas=160, max_rot_deg=45.0, scale_range=(0.5, 2.0)):
    """Canonical eye targets pushed through a random similarity, drawn as two Gaussian dots.

    Returns (RawImage, EyePair, rotation radians, scale) with the eyes inside the canvas.
    """
    from agfv.preprocess import EyePair, RawImage, canonical_eyes

    target = canonical_eyes(side)
    theta = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    scale = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
    a = scale * np.exp(1j * theta)
    mid = (complex(*target.left) + complex(*target.right)) / 2
    centre = complex(canvas / 2, canvas / 2) + complex(*rng.uniform(-10, 10, size=2))
    pts = [a * (complex(*p) - mid) + centre for p in (target.left, target.right)]
    if pts[0].real >= pts[1].real:
        # keep the image's left eye on the left after large rotations
        pts = pts[::-1]
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    sigma = 1.2 * max(scale, 1.0)
    img = np.zeros((canvas, canvas))
    for p in pts:
        img += np.exp(-((xs - p.real) ** 2 + (ys - p.imag) ** 2) / (2 * sigma**2))
    raw = RawImage(np.round(255 * np.clip(img, 0, 1)).astype(np.uint8))
    return raw, EyePair((pts[0].real, pts[0].imag), (pts[1].real, pts[1].imag)), theta, scale


def measured_eye_positions(face, radius=None):
    """Dot centroids of an aligned face in windows around the canonical targets."""
    from agfv.preprocess import canonical_eyes

    side = face.side
    radius = radius or int(0.15 * side)
    out = []
    for tx, ty in (canonical_eyes(side).left, canonical_eyes(side).right):
        x0, y0 = int(round(tx)) - radius, int(round(ty)) - radius
        win = face.pixels[max(y0, 0) : y0 + 2 * radius + 1, max(x0, 0) : x0 + 2 * radius + 1]
        cx, cy = dot_centroid(win)
        out.append((cx + max(x0, 0), cy + max(y0, 0)))
    return out


# -- synthetic difficulty ---------------------------------------------------


def raw_pixel_accuracy(gamma: float, seed: int, n: int = 40, k: int = 8, side: int = 32) -> float:
    """Mean two-fold accuracy of Euclidean distance on aligned pixels."""
    from agfv.dataset_io import synth_generate
    from agfv.evaluation import DISTANCE, accuracy, best_threshold
    from agfv.pipeline import align_samples, protocol_pairs
    from agfv.tensor import make_rng

    data_rng, pair_rng = make_rng(seed).spawn(2)
    faces = align_samples(synth_generate(n, k, gamma, data_rng), side)
    _, pairsets = protocol_pairs(faces, pair_rng)

    def dist(ps):
        return np.array([np.linalg.norm(r.a.pixels - r.b.pixels) for r in ps])

    accs = []
    for f in (0, 1):
        train, test = pairsets[f], pairsets[1 - f]
        tau, _ = best_threshold(dist(train), train.labels, DISTANCE)
        accs.append(accuracy(dist(test), test.labels, tau, DISTANCE))
    return float(np.mean(accs))
