#!/usr/bin/env python3
"""Independent reference trace for one training iteration.

Recomputes, with plain numpy and hand-derived gradient formulas only (no
package imports), every intermediate quantity of one 4-sample, 2-worker,
2-feature symmetrized training iteration: per-worker batch statistics,
teacher statistic blends, both loss terms, all parameter deltas, the lazy
history commit, and the post-step teacher EMA. The result is committed to
tests/data/golden_trace.json and the test suite asserts the package
reproduces it to 1e-10.

Run from the repository root:  python3 scripts/make_golden_trace.py
"""

import json
from pathlib import Path

import numpy as np

EPS = 1e-5
ALPHA = 0.25          # statistics blend, weight on the current batch
M_EMA = 0.5           # teacher weight EMA coefficient
LR = 0.05
WEIGHT_DECAY = 1e-4
GUARD_SQ = 1e-24      # squared zero-norm guard inside the row normalizer

# Fixed inputs: two views of a 4-sample, 2-feature batch, two workers.
V1 = np.array([
    [0.8, -0.4],
    [-0.3, 0.9],
    [1.2, 0.1],
    [-0.7, -0.6],
])
V2 = np.array([
    [0.9, -0.2],
    [-0.5, 0.7],
    [1.0, 0.3],
    [-0.6, -0.8],
])
WORKER_SLICES = [(0, 2), (2, 4)]

# Student parameters.
STUDENT = {
    "enc0.weight": np.array([[0.6, -0.3], [0.2, 0.5]]),
    "enc0.bias": np.array([0.1, -0.2]),
    "enc0.gamma": np.array([1.1, 0.9]),
    "enc0.beta": np.array([0.05, -0.05]),
    "proj0.weight": np.array([[0.4, 0.7], [-0.6, 0.3]]),
    "proj0.bias": np.array([0.0, 0.1]),
    "pred0.weight": np.array([[0.9, -0.2], [0.3, 0.8]]),
    "pred0.bias": np.array([-0.1, 0.2]),
}

# Teacher parameters (deliberately offset from the student so the EMA moves).
TEACHER = {
    "enc0.weight": STUDENT["enc0.weight"] + 0.05,
    "enc0.bias": STUDENT["enc0.bias"] - 0.03,
    "enc0.gamma": STUDENT["enc0.gamma"] - 0.08,
    "enc0.beta": STUDENT["enc0.beta"] + 0.02,
    "proj0.weight": STUDENT["proj0.weight"] - 0.04,
    "proj0.bias": STUDENT["proj0.bias"] + 0.06,
}

# Pre-seeded teacher BN history (encoder layer only).
HIST_MEAN = np.array([0.3, -0.1])
HIST_VAR = np.array([1.5, 0.8])


def per_worker_bn_forward(a, gamma, beta):
    """Per-slice normalization; returns output and per-slice caches."""
    out = np.empty_like(a)
    caches = []
    for lo, hi in WORKER_SLICES:
        sl = a[lo:hi]
        mu = sl.mean(axis=0)
        var = sl.var(axis=0)
        sd = np.sqrt(var + EPS)
        xhat = (sl - mu) / sd
        out[lo:hi] = gamma * xhat + beta
        caches.append({"mu": mu, "var": var, "sd": sd, "xhat": xhat,
                       "x": sl.copy()})
    return out, caches


def per_worker_bn_backward(dy, caches, gamma):
    """Full BN backward through per-slice mean and variance."""
    dx = np.empty_like(dy)
    dgamma = np.zeros_like(gamma)
    dbeta = np.zeros_like(gamma)
    for (lo, hi), cache in zip(WORKER_SLICES, caches):
        dys = dy[lo:hi]
        m = hi - lo
        xhat, sd, xc = cache["xhat"], cache["sd"], cache["x"] - cache["mu"]
        dgamma += (dys * xhat).sum(axis=0)
        dbeta += dys.sum(axis=0)
        dxhat = dys * gamma
        dvar = (dxhat * xc).sum(axis=0) * (-0.5) * sd ** -3
        dmu = (dxhat * (-1.0 / sd)).sum(axis=0) + dvar * (-2.0 / m) * xc.sum(axis=0)
        dx[lo:hi] = dxhat / sd + dvar * 2.0 * xc / m + dmu / m
    return dx, dgamma, dbeta


def student_forward(v):
    a = v @ STUDENT["enc0.weight"] + STUDENT["enc0.bias"]
    h, caches = per_worker_bn_forward(a, STUDENT["enc0.gamma"],
                                      STUDENT["enc0.beta"])
    r = np.maximum(h, 0.0)
    z = r @ STUDENT["proj0.weight"] + STUDENT["proj0.bias"]
    p = z @ STUDENT["pred0.weight"] + STUDENT["pred0.bias"]
    return {"a": a, "h": h, "r": r, "z": z, "p": p, "caches": caches, "v": v}


def teacher_forward(v):
    a = v @ TEACHER["enc0.weight"] + TEACHER["enc0.bias"]
    mu_batch = a.mean(axis=0)
    var_batch = a.var(axis=0)
    mu_use = ALPHA * mu_batch + (1.0 - ALPHA) * HIST_MEAN
    var_use = ALPHA * var_batch + (1.0 - ALPHA) * HIST_VAR
    h = TEACHER["enc0.gamma"] * (a - mu_use) / np.sqrt(var_use + EPS) \
        + TEACHER["enc0.beta"]
    r = np.maximum(h, 0.0)
    z = r @ TEACHER["proj0.weight"] + TEACHER["proj0.bias"]
    return {"z": z, "mu_batch": mu_batch, "var_batch": var_batch,
            "mu_use": mu_use, "var_use": var_use}


def normalize_rows(x):
    return x / np.sqrt((x * x).sum(axis=1, keepdims=True) + GUARD_SQ)


def byol_term(p, z_teacher):
    p_hat = normalize_rows(p)
    z_hat = normalize_rows(z_teacher)
    d = p_hat - z_hat
    return float(np.mean((d * d).sum(axis=1)))


def byol_grad_wrt_p(p, z_teacher):
    """d/dp of mean_i ||p_hat_i - z_hat_i||^2 (teacher side constant)."""
    n = p.shape[0]
    norms = np.sqrt((p * p).sum(axis=1, keepdims=True) + GUARD_SQ)
    p_hat = p / norms
    z_hat = normalize_rows(z_teacher)
    dot = (p_hat * z_hat).sum(axis=1, keepdims=True)
    return -(2.0 / n) * (z_hat - p_hat * dot) / norms


def student_backward(cache, dp):
    grads = {}
    z, r, v = cache["z"], cache["r"], cache["v"]
    grads["pred0.weight"] = z.T @ dp
    grads["pred0.bias"] = dp.sum(axis=0)
    dz = dp @ STUDENT["pred0.weight"].T
    grads["proj0.weight"] = r.T @ dz
    grads["proj0.bias"] = dz.sum(axis=0)
    dr = dz @ STUDENT["proj0.weight"].T
    dh = dr * (cache["h"] > 0.0)
    dx, dgamma, dbeta = per_worker_bn_backward(dh, cache["caches"],
                                               STUDENT["enc0.gamma"])
    grads["enc0.gamma"] = dgamma
    grads["enc0.beta"] = dbeta
    grads["enc0.weight"] = v.T @ dx
    grads["enc0.bias"] = dx.sum(axis=0)
    return grads


def main():
    # Forwards (teacher normalizes both views against the same pre-iteration
    # history; its history is committed only at the end).
    s1 = student_forward(V1)
    t2 = teacher_forward(V2)   # pairs with the student's view-1 prediction
    s2 = student_forward(V2)
    t1 = teacher_forward(V1)

    # Degeneracy guards: the trace must avoid kinks and zero rows.
    for c in (s1, s2):
        assert np.abs(c["h"]).min() > 1e-8, "ReLU input too close to zero"
        assert np.linalg.norm(c["p"], axis=1).min() > 1e-3
    loss1 = byol_term(s1["p"], t2["z"])
    loss2 = byol_term(s2["p"], t1["z"])

    g1 = student_backward(s1, byol_grad_wrt_p(s1["p"], t2["z"]))
    g2 = student_backward(s2, byol_grad_wrt_p(s2["p"], t1["z"]))
    grads = {k: g1[k] + g2[k] for k in g1}

    # Momentum SGD from zero buffers: one step moves by lr * (g + wd * w).
    deltas = {}
    new_student = {}
    for name, w in STUDENT.items():
        d = grads[name] + WEIGHT_DECAY * w
        deltas[name] = -LR * d
        new_student[name] = w + deltas[name]

    # Lazy history commit: average of the two views' batch statistics,
    # blended with weight ALPHA on the average.
    avg_mean = 0.5 * (t2["mu_batch"] + t1["mu_batch"])
    avg_var = 0.5 * (t2["var_batch"] + t1["var_batch"])
    new_hist_mean = ALPHA * avg_mean + (1.0 - ALPHA) * HIST_MEAN
    new_hist_var = ALPHA * avg_var + (1.0 - ALPHA) * HIST_VAR

    # Teacher EMA tracks the post-step student.
    new_teacher = {name: (1.0 - M_EMA) * w + M_EMA * new_student[name]
                   for name, w in TEACHER.items()}

    def listify(x):
        return np.asarray(x).tolist()

    trace = {
        "setup": {
            "eps": EPS, "alpha": ALPHA, "m_ema": M_EMA, "lr": LR,
            "weight_decay": WEIGHT_DECAY,
            "v1": listify(V1), "v2": listify(V2),
            "student": {k: listify(v) for k, v in STUDENT.items()},
            "teacher": {k: listify(v) for k, v in TEACHER.items()},
            "hist_mean": listify(HIST_MEAN), "hist_var": listify(HIST_VAR),
        },
        "student_worker_stats_v1": [
            {"mean": listify(c["mu"]), "var": listify(c["var"])}
            for c in s1["caches"]],
        "student_worker_stats_v2": [
            {"mean": listify(c["mu"]), "var": listify(c["var"])}
            for c in s2["caches"]],
        "teacher_batch_stats_v2": {"mean": listify(t2["mu_batch"]),
                                   "var": listify(t2["var_batch"])},
        "teacher_batch_stats_v1": {"mean": listify(t1["mu_batch"]),
                                   "var": listify(t1["var_batch"])},
        "teacher_blended_v2": {"mean": listify(t2["mu_use"]),
                               "var": listify(t2["var_use"])},
        "teacher_blended_v1": {"mean": listify(t1["mu_use"]),
                               "var": listify(t1["var_use"])},
        "student_prediction_v1": listify(s1["p"]),
        "student_prediction_v2": listify(s2["p"]),
        "teacher_projection_v2": listify(t2["z"]),
        "teacher_projection_v1": listify(t1["z"]),
        "loss_term_1": loss1,
        "loss_term_2": loss2,
        "loss_total": loss1 + loss2,
        "gradients": {k: listify(v) for k, v in grads.items()},
        "parameter_deltas": {k: listify(v) for k, v in deltas.items()},
        "history_commit": {"mean": listify(new_hist_mean),
                           "var": listify(new_hist_var)},
        "teacher_after_ema": {k: listify(v) for k, v in new_teacher.items()},
    }

    out = Path(__file__).resolve().parent.parent / "tests" / "data" \
        / "golden_trace.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(trace, indent=1), encoding="utf-8")
    print(f"wrote {out} (loss {loss1 + loss2:.12f})")


if __name__ == "__main__":
    main()
