"""Independent reference implementations used as test oracles.

Nothing here calls into gsmeta's gradient code: finite differences run on
plain numpy functions, and the loss/metric oracles are explicit loops.
"""
import math

import numpy as np

from gsmeta import autodiff as ad

FD_STEP = 1e-5


def fd_gradient(f, arrays, step=FD_STEP):
    """Central differences of scalar numpy function ``f`` w.r.t. each array."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, x in enumerate(base):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            hi = float(f(*base))
            x[idx] = orig - step
            lo = float(f(*base))
            x[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def reverse_mode(f, arrays):
    leaves = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = f(*leaves)
    grads = ad.backward(tape, out)
    return out.item(), [grads[t] for t in leaves]


def away_from_zero(x, margin=0.05):
    """Push entries out of (-margin, margin) so kinks are never straddled."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _np_cos(a, b):
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def op_cases():
    """name -> builder(rng) returning (autodiff fn, numpy fn, input arrays).

    Each function maps its inputs to a scalar by contracting the op output
    with a fixed random weight array, so every output entry is exercised.
    """
    def wrap(ad_op, np_op, inputs, out_shape, rng):
        w = rng.normal(size=out_shape)
        return (lambda *t: ad.sum_(ad_op(*t) * w)), (lambda *a: float((np_op(*a) * w).sum())), inputs

    def case(ad_op, np_op, shapes, positive=False, kink=False):
        def build(rng):
            inputs = [rng.normal(size=s) for s in shapes]
            if positive:
                inputs = [np.abs(x) + 0.5 for x in inputs]
            if kink:
                inputs = [away_from_zero(x) for x in inputs]
            out_shape = np.shape(np_op(*inputs))
            return wrap(ad_op, np_op, inputs, out_shape, rng)
        return build

    return {
        "add": case(ad.add, np.add, [(3, 4), (3, 4)]),
        "add_broadcast_row": case(ad.add, np.add, [(3, 4), (4,)]),
        "add_scalar": case(lambda a, s: ad.add(a, ad.reshape(s, ())), lambda a, s: a + s.reshape(()), [(3, 4), (1,)]),
        "sub": case(ad.sub, np.subtract, [(2, 5), (2, 5)]),
        "mul": case(ad.mul, np.multiply, [(3, 4), (3, 4)]),
        "mul_broadcast_col": case(ad.mul, np.multiply, [(3, 4), (3, 1)]),
        "div": case(ad.div, np.divide, [(3, 4), (3, 4)], positive=True),
        "neg": case(ad.neg, np.negative, [(4, 3)]),
        "matmul": case(ad.matmul, np.matmul, [(3, 4), (4, 2)]),
        "abs": case(ad.abs_, np.abs, [(5, 3)], kink=True),
        "exp": case(ad.exp, np.exp, [(4, 3)]),
        "log": case(ad.log, np.log, [(4, 3)], positive=True),
        "sigmoid": case(ad.sigmoid, _np_sigmoid, [(4, 3)]),
        "leaky_relu": case(ad.leaky_relu, lambda x: np.where(x > 0, x, 0.01 * x), [(5, 3)], kink=True),
        "softmax_last": case(lambda a: ad.softmax(a, axis=-1), lambda a: _np_softmax(a, -1), [(3, 5)]),
        "softmax_first": case(lambda a: ad.softmax(a, axis=0), lambda a: _np_softmax(a, 0), [(3, 5)]),
        "sum_all": case(lambda a: ad.reshape(ad.sum_(a), (1,)), lambda a: np.sum(a).reshape(1), [(3, 4)]),
        "sum_axis": case(lambda a: ad.sum_(a, axis=1), lambda a: a.sum(axis=1), [(3, 4)]),
        "mean_all": case(lambda a: ad.reshape(ad.mean(a), (1,)), lambda a: np.mean(a).reshape(1), [(3, 4)]),
        "mean_axis_keepdims": case(lambda a: ad.mean(a, axis=0, keepdims=True),
                                   lambda a: a.mean(axis=0, keepdims=True), [(3, 4)]),
        "concat_rows": case(lambda a, b: ad.concat([a, b], axis=0), lambda a, b: np.concatenate([a, b], 0),
                            [(2, 3), (3, 3)]),
        "concat_cols": case(lambda a, b: ad.concat([a, b], axis=1), lambda a, b: np.concatenate([a, b], 1),
                            [(2, 3), (2, 2)]),
        "cosine_similarity": case(ad.cosine_similarity, _np_cos, [(4, 5), (4, 5)]),
        "cosine_similarity_broadcast": case(
            lambda a, b: ad.cosine_similarity(ad.reshape(a, (3, 1, 4)), ad.reshape(b, (1, 2, 4))),
            lambda a, b: _np_cos(a.reshape(3, 1, 4), b.reshape(1, 2, 4)), [(3, 4), (2, 4)]),
        "take_rows_repeated": case(lambda a: ad.take(a, [0, 2, 2, 1]), lambda a: a[[0, 2, 2, 1]], [(3, 4)]),
        "reshape": case(lambda a: ad.reshape(a, (2, 6)), lambda a: a.reshape(2, 6), [(3, 4)]),
        "transpose": case(ad.transpose, np.transpose, [(3, 4)]),
    }


# loss and metric oracles --------------------------------------------------


def bce_bruteforce(y, y_hat, eps=1e-7):
    total = 0.0
    for yi, pi in zip(y, y_hat):
        p = min(max(pi, eps), 1 - eps)
        total += -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
    return total


def contrastive_bruteforce(g1, g2, tau, standard=False):
    B = len(g1)

    def cos(u, v):
        return sum(a * b for a, b in zip(u, v)) / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))

    total = 0.0
    for t in range(B):
        pos = math.exp(cos(g1[t], g2[t]) / tau)
        den = sum(math.exp(cos(g1[t], g2[s]) / tau) for s in range(B) if standard or s != t)
        total += -math.log(pos / den)
    return total / B


def auc_bruteforce(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def multinomial_within(counts, probs, n, sigmas=3.0):
    """Every category count within ``sigmas`` binomial standard deviations of n * p."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    sd = np.sqrt(n * probs * (1 - probs))
    return bool(np.all(np.abs(counts - n * probs) <= sigmas * sd + 1e-12))


# end-to-end fixtures ------------------------------------------------------


def tiny_episode(seed, k_shot=2, n_aux=2, d=4, hidden=6, gnn_layers=2, encoder_layers=1, **flags):
    """Small random graph, one sampled episode and fresh parameters."""
    from gsmeta.episode import sample_episode
    from gsmeta.mpg import Dataset, build_mpg, split_properties
    from gsmeta.relnet import ModelConfig, init_params

    rng = np.random.default_rng(seed)
    smiles = ["CCO", "CC(=O)O", "c1ccccc1", "CCN", "C1CC1", "OCC(O)CO", "CC#N", "NCC(=O)O", "CS", "ClCCl"]
    n_mol, n_prop = 12, n_aux + 2
    labels = np.stack([rng.permutation(np.arange(n_mol) % 2) for _ in range(n_prop)], axis=1).astype(float)
    labels[rng.random(labels.shape) < 0.1] = np.nan
    labels[:, 0] = np.arange(n_mol) % 2  # target column stays complete and balanced
    ds = Dataset(tuple(smiles[i % len(smiles)] for i in range(n_mol)), tuple(f"p{j}" for j in range(n_prop)), labels)
    mpg = build_mpg(ds, d, rng=rng)
    split = split_properties(mpg, 1)
    cfg = ModelConfig(d=d, encoder_layers=encoder_layers, gnn_layers=gnn_layers, top_k=max(1, k_shot - 1),
                      hidden=hidden, **flags)
    params = init_params(cfg, mpg.property_embeddings, rng)
    ep = sample_episode(mpg, split, 0, k_shot, 1, n_aux, rng)
    return mpg, split, ep, params, cfg


def fd_on_params(value_fn, params, keys=None, n_coords=None, rng=None, step=FD_STEP):
    """Central differences of ``value_fn(params) -> float`` on chosen coordinates.

    Returns ``{key: [(flat index, derivative), ...]}``. ``value_fn`` only
    evaluates forward values; no gradient code is involved.
    """
    keys = sorted(params) if keys is None else keys
    coords = [(k, i) for k in keys for i in range(params[k].size)]
    if n_coords is not None and n_coords < len(coords):
        pick = (rng or np.random.default_rng(0)).choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for k, i in coords:
        flat = work[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        hi = value_fn(work)
        flat[i] = orig - step
        lo = value_fn(work)
        flat[i] = orig
        out.setdefault(k, []).append((i, (hi - lo) / (2 * step)))
    return out


def compare_sparse(grads, numeric):
    """Relative error between analytic gradient entries and sparse FD entries."""
    a = np.array([grads[k].reshape(-1)[i] for k, items in numeric.items() for i, _ in items])
    n = np.array([v for items in numeric.values() for _, v in items])
    return rel_err(a, n)


def reference_fomaml(mpg, split, cfg):
    """Uniform-sampling first-order MAML with no scheduler or contrastive code.

    Reuses only the forward model, the samplers and the stream seeding; the
    inner step, gradient averaging and Adam update are written out here.
    Returns (per-step query losses, final parameters).
    """
    from gsmeta import meta, nn
    from gsmeta.episode import sample_candidate_pool
    from gsmeta.relnet import bce_loss, forward_episode

    mcfg = cfg.model_config()
    theta, _ = meta.init_model(mpg, cfg)
    sampling = meta.rng_stream(cfg.seed, "sampling")
    selection = meta.rng_stream(cfg.seed, "selection")
    n_aux = cfg.train_aux_count(len(split.train))

    def grad_of(params, ep, which):
        with ad.Tape() as tape:
            lv = nn.as_leaves(params)
            res = forward_episode(ep, mpg, lv, mcfg)
            if which == "support":
                loss = bce_loss(ep.support_labels, res.support_predictions)
            else:
                loss = bce_loss(ep.query_labels, res.query_predictions)
        g = ad.backward(tape, loss)
        return loss.item(), {k: g[t] for k, t in lv.items()}

    m = {k: 0.0 for k in theta}
    v = {k: 0.0 for k in theta}
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []
    for step in range(1, cfg.max_steps + 1):
        pool = sample_candidate_pool(mpg, split, cfg.n_pool, cfg.k_shot, cfg.n_query, n_aux, sampling)
        picks = selection.choice(cfg.n_pool, size=cfg.batch_size, replace=False)
        total = {k: np.zeros_like(x) for k, x in theta.items()}
        step_losses = []
        for i in picks:
            for ep in pool[int(i)]:
                adapted = dict(theta)
                for _ in range(cfg.inner_steps):
                    _, g = grad_of(adapted, ep, "support")
                    adapted = {k: x - cfg.inner_lr * g[k] for k, x in adapted.items()}
                loss, g = grad_of(adapted, ep, "query")
                step_losses.append(loss)
                for k in total:
                    total[k] += g[k]
        scale = 1.0 / (2 * cfg.batch_size)
        for k in total:
            total[k] *= scale
        losses.append(float(sum(step_losses)) * scale)
        c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
        new = {}
        for k, x in theta.items():
            m[k] = b1 * m[k] + (1.0 - b1) * total[k]
            v[k] = b2 * v[k] + (1.0 - b2) * total[k] * total[k]
            new[k] = x - cfg.outer_lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
        theta = new
    return losses, theta
