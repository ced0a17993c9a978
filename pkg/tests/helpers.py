"""Shared fixtures-as-functions for the test suite."""

from __future__ import annotations

import numpy as np

from oceancast import autodiff as ad
from oceancast.grid import GeoGrid
from oceancast.metrics import LossConfig, multivar_loss
from oceancast.model import ForecastModel, ModelConfig, forecast_step

GRADCHECK_CONFIG = ModelConfig(
    patch_size=2, embed_dim=8, enc_layers=(2,), dec_layers=(2,), window=2, n_heads=2,
    latent_levels=2, mlp_ratio=2, fourier_bands=2,
)


def random_grid(rng, n_lat, n_lon, land_fraction=0.3) -> GeoGrid:
    lat0 = rng.uniform(-80, 70)
    lon0 = rng.uniform(-180, 150)
    land = rng.random((n_lat, n_lon)) < land_fraction
    land.flat[rng.integers(land.size)] = False  # at least one sea cell
    return GeoGrid(lat0, lat0 + rng.uniform(0.5, 10), lon0, lon0 + rng.uniform(0.5, 20), n_lat, n_lon, land)


def randomize_head(model: ForecastModel, rng, scale=0.3) -> None:
    """The zero-initialised output head would block every upstream gradient."""
    for name in ("decoder.head.weight", "decoder.head.bias"):
        t = model.params[name]
        t.data[...] = rng.normal(0.0, scale, t.shape)


def gradcheck_setup(seed=0, config=GRADCHECK_CONFIG, size=4):
    rng = np.random.default_rng(seed)
    statics = (rng.random((1, size, size)) < 0.25).astype(np.float64)
    model = ForecastModel(config, statics=statics, seed=seed)
    randomize_head(model, rng)
    x_prev = rng.normal(size=(1, size, size))
    x_curr = x_prev + 0.1 * rng.normal(size=(1, size, size))
    with ad.no_grad():
        pred = forecast_step(model, x_prev, x_curr).data
    # targets kept well away from predictions so |.| has no kink near the point
    target = pred + rng.choice([-1.0, 1.0], pred.shape) * rng.uniform(0.5, 1.0, pred.shape)
    weights = np.where(statics[0] > 0, 0.0, 1.0)
    weights = weights / weights.mean() * (weights > 0)
    return model, x_prev, x_curr, target, weights


def param_loss_fn(model, names, x_prev, x_curr, target, weights, cfg=LossConfig()):
    """Loss as a function of the named parameter tensors, for grad_check."""

    def f(*tensors):
        saved = [model.params.params[n].tensor for n in names]
        for n, t in zip(names, tensors):
            model.params.params[n].tensor = t
        try:
            pred = forecast_step(model, x_prev, x_curr)
            return multivar_loss(pred, target, cfg, weights)
        finally:
            for n, t in zip(names, saved):
                model.params.params[n].tensor = t

    return f


# ---------------------------------------------------------------- scalar-loop oracles


def oracle_weights(lats, land):
    """cos(lat) over sea cells, rescaled so the sea mean is one; land zero."""
    import math

    n_lat, n_lon = len(land), len(land[0])
    raw = [[0.0 if land[i][j] else math.cos(math.radians(lats[i])) for j in range(n_lon)] for i in range(n_lat)]
    n_sea = sum(1 for i in range(n_lat) for j in range(n_lon) if not land[i][j])
    total = sum(raw[i][j] for i in range(n_lat) for j in range(n_lon))
    return [[raw[i][j] * n_sea / total for j in range(n_lon)] for i in range(n_lat)]


def _sea_cells(w):
    return [(i, j) for i in range(len(w)) for j in range(len(w[0])) if w[i][j] != 0.0]


def oracle_rmse(pred, target, w):
    cells = _sea_cells(w)
    return (sum(w[i][j] * (target[i][j] - pred[i][j]) ** 2 for i, j in cells) / len(cells)) ** 0.5


def oracle_bias(pred, target, w):
    cells = _sea_cells(w)
    return sum(w[i][j] * (target[i][j] - pred[i][j]) for i, j in cells) / len(cells)


def oracle_mae(pred, target, w):
    cells = _sea_cells(w)
    return sum(w[i][j] * abs(target[i][j] - pred[i][j]) for i, j in cells) / len(cells)


def oracle_acc(pred, target, w):
    cells = _sea_cells(w)
    n = len(cells)
    mt = sum(w[i][j] * target[i][j] for i, j in cells) / n
    mp = sum(w[i][j] * pred[i][j] for i, j in cells) / n
    cov = sum(w[i][j] * (target[i][j] - mt) * (pred[i][j] - mp) for i, j in cells)
    vt = sum(w[i][j] * (target[i][j] - mt) ** 2 for i, j in cells)
    vp = sum(w[i][j] * (pred[i][j] - mp) ** 2 for i, j in cells)
    return cov / (vt * vp) ** 0.5


def oracle_loss(surf_p, surf_t, atm_p, atm_t, w, alpha, beta, gamma, ws, wa):
    """gamma/(VS+VA) * (alpha*sum_k ws_k MAE_k + beta*sum_k (1/C) sum_c wa_kc MAE_kc)."""
    vs, va = len(surf_p), len(atm_p)
    s = sum(ws[k] * oracle_mae(surf_p[k], surf_t[k], w) for k in range(vs))
    a = 0.0
    for k in range(va):
        c = len(atm_p[k])
        a += sum(wa[k][l] * oracle_mae(atm_p[k][l], atm_t[k][l], w) for l in range(c)) / c
    return gamma / (vs + va) * (alpha * s + beta * a)


# ---------------------------------------------------------------- windowed attention reference


def window_group(i, shift, window):
    """Window index along one axis under a (possibly shifted) partition.

    A cyclic roll by ``-shift`` followed by seam masking is equivalent to a
    partition whose windows start at ``shift``, with the two edge pieces kept
    apart; ``floor((i - shift) / window)`` labels exactly those pieces.
    """
    return (i - shift) // window


def dense_window_attention(x, wqkv, bqkv, wproj, bproj, window, heads, shifted):
    """Per-token loop: each valid query attends to every valid token in its window."""
    import math

    B, L, H, W, D = x.shape
    shift = window // 2 if shifted else 0
    dh = D // heads
    qkv = x @ wqkv + bqkv
    q, k, v = qkv[..., :D], qkv[..., D:2 * D], qkv[..., 2 * D:]
    out = np.zeros_like(x)
    tokens = [(l, i, j) for l in range(L) for i in range(H) for j in range(W)]
    for b in range(B):
        for (l, i, j) in tokens:
            gi, gj = window_group(i, shift, window), window_group(j, shift, window)
            keys = [t for t in tokens
                    if window_group(t[1], shift, window) == gi and window_group(t[2], shift, window) == gj]
            heads_out = []
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                qv = q[b, l, i, j, sl]
                scores = np.array([qv @ k[b, kl, ki, kj, sl] for kl, ki, kj in keys]) / math.sqrt(dh)
                p = np.exp(scores - scores.max())
                p /= p.sum()
                heads_out.append(sum(pk * v[b, kl, ki, kj, sl] for pk, (kl, ki, kj) in zip(p, keys)))
            out[b, l, i, j] = np.concatenate(heads_out) @ wproj + bproj
    return out


def window_attention_case(rng, B, L, H, W, D, heads, window, shifted):
    """Run the library's windowed attention on random data; return (lib, reference, weights, x)."""
    from oceancast.autodiff import ParamStore
    from oceancast.model import Linear, windowed_attention

    store = ParamStore()
    qkv = Linear(store, "qkv", D, 3 * D, "processor", rng)
    proj = Linear(store, "proj", D, D, "processor", rng)
    for n in store.names():
        store[n].data[...] = rng.normal(0, 0.7, store[n].shape)
    x = rng.normal(size=(B, L, H, W, D))
    y, weights = windowed_attention(x, qkv, proj, window, heads, shifted, return_weights=True)
    ref = dense_window_attention(x, store["qkv.weight"].data, store["qkv.bias"].data,
                                 store["proj.weight"].data, store["proj.bias"].data, window, heads, shifted)
    return y.data, ref, weights.data, x


def forbidden_weight_total(weights, L, H, W, window, shifted):
    """Sum of attention weight that valid queries put on keys outside their window piece."""
    shift = window // 2 if shifted else 0
    hp, wp = -(-H // window) * window, -(-W // window) * window
    nw = wp // window

    def original(widx, t):
        l, rem = divmod(t, window * window)
        a, c = divmod(rem, window)
        wh, ww = divmod(widx, nw)
        return l, (wh * window + a + shift) % hp, (ww * window + c + shift) % wp

    total = 0.0
    n_win, n_tok = weights.shape[1], weights.shape[-1]
    for widx in range(n_win):
        pos = [original(widx, t) for t in range(n_tok)]
        for qi, (_, i, j) in enumerate(pos):
            if i >= H or j >= W:
                continue
            for ki, (_, a, c) in enumerate(pos):
                ok = (a < H and c < W and window_group(a, shift, window) == window_group(i, shift, window)
                      and window_group(c, shift, window) == window_group(j, shift, window))
                if not ok:
                    total += float(np.abs(weights[:, widx, :, qi, ki]).sum())
    return total


# ---------------------------------------------------------------- training fixtures

SMALL_TRAIN_CONFIG = ModelConfig(embed_dim=8, n_heads=2, enc_layers=(1, 1), dec_layers=(1, 1), mlp_ratio=2)


def stage_data(n_days=40, size=8, seed=0, **synth):
    """Normalized train/val windows from a small synthetic series."""
    from oceancast.grid import (
        SplitSpec, celsius_to_kelvin, fill_missing_with_mean, fit_norm_stats, latitude_weights, normalize,
        sliding_windows, temporal_split,
    )
    from oceancast.synthetic import SynthParams, synthetic_sst
    from oceancast.training import StageData

    params = SynthParams(n_days=n_days, n_lat=size, n_lon=size, land_cols=2, seed=seed, **synth)
    s = fill_missing_with_mean(celsius_to_kelvin(synthetic_sst(params)))
    split = SplitSpec.from_fractions(s.times, 0.7, 0.15)
    stats = fit_norm_stats(s, split)
    tr, va, te = (normalize(x, stats) for x in temporal_split(s, split))
    w = latitude_weights(s.grid).effective
    return StageData(sliding_windows(tr, 1), sliding_windows(va, 1), w, stats), (tr, va, te)


def small_model(config=SMALL_TRAIN_CONFIG, size=8, seed=0):
    statics = np.zeros((1, size, size))
    statics[:, :, -2:] = 1.0
    return ForecastModel(config, statics=statics, seed=seed)
