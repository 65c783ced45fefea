"""Finite-difference verification suite over every differentiable primitive,
both attention blocks, and the assembled two-stream model.

Each case perturbs inputs drawn from [-2, 2] at 64-bit precision and reports
the worst relative error between the taped gradient and central differences.
Readouts mix the op output through fixed positive weights plus a sigmoid so
no checked gradient coordinate is structurally zero (tiny true gradients
would drown in difference noise and report spurious errors).
"""

import numpy as np

from biqa import attention as att
from biqa import autodiff as ad
from biqa import metrics as mx
from biqa import model as mdl

PRIMITIVE_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def _primitive_cases():
    rng = np.random.default_rng(20240901)

    def t(shape, lo=-2.0, hi=2.0):
        return ad.Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)

    dense_w, dense_b = t((6, 4)), t((4,))
    conv_k, conv_b = t((3, 3, 2, 3)), t((3,))
    gate = t((1, 1, 1, 4))
    bn_gamma = ad.Tensor(rng.uniform(0.5, 1.5, size=5), dtype=np.float64)
    bn_beta = t((5,))
    bn_read = ad.Tensor(rng.uniform(0.5, 1.5, size=(6, 5)), dtype=np.float64)

    def readout(x):
        return ad.tsum(ad.sigmoid(x))

    def bn(mode):
        def f(x):
            rm = np.zeros(5) if mode == "train" else np.full(5, 0.3)
            rv = np.ones(5) if mode == "train" else np.full(5, 1.7)
            y = ad.batchnorm(x, bn_gamma, bn_beta, rm, rv, mode)
            return ad.tsum(ad.mul(ad.sigmoid(y), bn_read))
        return f

    def drop(x):
        return ad.tsum(ad.dropout(x, 0.25, "train", np.random.default_rng(7)))

    return [
        ("relu", lambda x: readout(ad.relu(x)), (7,)),
        ("sigmoid", lambda x: ad.tsum(ad.sigmoid(x)), (7,)),
        ("add", lambda x: readout(ad.add(x, gate)), (2, 3, 3, 4)),
        ("mul", lambda x: readout(ad.mul(x, gate)), (2, 3, 3, 4)),
        ("concat_last_axis", lambda x: readout(ad.concat_last_axis(x, ad.mul(x, x))), (1, 2, 2, 3)),
        ("dense", lambda x: readout(ad.dense(x, dense_w, dense_b)), (3, 6)),
        ("conv2d_3x3", lambda x: readout(ad.conv2d_3x3(x, conv_k, conv_b)), (2, 4, 4, 2)),
        ("avg_pool_spatial", lambda x: readout(ad.pool(x, "avg", "spatial")), (2, 3, 3, 4)),
        ("max_pool_spatial", lambda x: readout(ad.pool(x, "max", "spatial")), (2, 3, 3, 4)),
        ("avg_pool_channel", lambda x: readout(ad.pool(x, "avg", "channel")), (2, 3, 3, 4)),
        ("max_pool_channel", lambda x: readout(ad.pool(x, "max", "channel")), (2, 3, 3, 4)),
        ("maxpool2x2", lambda x: readout(ad.maxpool2x2(x)), (1, 4, 4, 3)),
        ("batchnorm_train", bn("train"), (6, 5)),
        ("batchnorm_eval", bn("eval"), (6, 5)),
        ("dropout", drop, (5, 5)),
        ("reshape", lambda x: readout(ad.flatten(x)), (2, 2, 2, 2)),
        ("sum", lambda x: ad.tsum(ad.mul(x, x)), (3, 4)),
        ("mean", lambda x: ad.tmean(ad.mul(x, x)), (3, 4)),
    ]


def _attention_cases():
    rng = np.random.default_rng(20240902)
    sp = att.SpatialAttentionParams(
        ad.Tensor(rng.standard_normal((3, 3, 2, 1)), dtype=np.float64),
        ad.Tensor(rng.standard_normal(1), dtype=np.float64))
    ch = att.ChannelAttentionParams(
        ad.Tensor(rng.standard_normal((16, 2)), dtype=np.float64),
        ad.Tensor(rng.standard_normal(2), dtype=np.float64),
        ad.Tensor(rng.standard_normal((2, 8)), dtype=np.float64),
        ad.Tensor(rng.standard_normal(8), dtype=np.float64))
    return [
        ("spatial_attention", lambda x: ad.tsum(ad.sigmoid(att.spatial_attention(x, sp))), (1, 3, 3, 8)),
        ("channel_attention", lambda x: ad.tsum(ad.sigmoid(att.channel_attention(x, ch))), (1, 3, 3, 8)),
    ]


def check_primitives(trials=10, eps=1e-5, seed=0):
    """Per-op worst relative error over `trials` random inputs."""
    rng = np.random.default_rng(20240903 + seed)
    results = []
    for name, f, shape in _primitive_cases() + _attention_cases():
        worst = 0.0
        for _ in range(trials):
            x = ad.Tensor(rng.uniform(-2, 2, size=shape), dtype=np.float64)
            worst = max(worst, ad.finite_diff_check(f, x, eps=eps))
        results.append((name, worst))
    return results


def _micro_model():
    cfg = mdl.ModelConfig(
        input_size=(16, 16),
        stream_a=mdl.BackboneSpec(stages=[mdl.StageSpec(4, convs=1), mdl.StageSpec(8, convs=1)]),
        stream_b=mdl.BackboneSpec(stages=[mdl.StageSpec(6, convs=1)]),
        head_widths=[6, 4],
        head_dropout=[0.25, 0.25],
    )
    return mdl.build_model(cfg, seed=20240904, dtype=np.float64)


def check_model(eps=1e-5):
    """End-to-end check: gradients of a weighted sum of the two-stream
    model's predictions with respect to every parameter, in eval mode and in
    train mode (batch statistics plus fixed dropout masks).

    Two conditioning choices keep true gradients away from zero, where the
    relative error would only measure difference noise: the samples get
    distinct readout weights (batch normalization makes per-sample gradients
    cancel in a plain mean), and the train-mode batch has 4 samples (with 2,
    batch normalization emits exactly +-1 regardless of its input, so every
    upstream gradient vanishes identically).
    Returns [(name, worst_rel_err), ...]."""
    rng = np.random.default_rng(20240905)
    results = []
    for mode, n in (("eval", 2), ("train", 4)):
        batch = ad.Tensor(rng.random((n, 16, 16, 3)), dtype=np.float64)
        readout = ad.Tensor(np.linspace(0.7, 1.3, n)[:, None], dtype=np.float64)
        model = _micro_model()

        def f(_x):
            drop_rng = np.random.default_rng(11) if mode == "train" else None
            preds = model.forward(batch, mode, rng=drop_rng)
            return ad.tsum(ad.mul(preds, readout))

        worst = 0.0
        for name, entry in model.params.entries():
            if not entry.trainable:
                continue
            worst = max(worst, ad.finite_diff_check(f, entry.tensor, eps=eps))
        results.append((f"model_{mode}", worst))
    results.append(("model_loss", check_loss_path(eps)))
    return results


def check_loss_path(eps=1e-5):
    """The exact gradient path of a training step: forward, analytic loss
    gradient injected as the backward seed, accumulated into the parameters.
    Compared against central differences of the scalar loss on a 2-sample
    batch (eval-mode forward keeps the loss a pure function)."""
    rng = np.random.default_rng(20240906)
    model = _micro_model()
    batch = ad.Tensor(rng.random((2, 16, 16, 3)), dtype=np.float64)
    y = np.array([0.25, 0.8])
    cfg = mx.LossConfig()

    def loss_value():
        preds = model.forward(batch, "eval").data[:, 0]
        return mx.combined_loss(y, preds, cfg)[0]

    with ad.Tape() as tape:
        preds = model.forward(batch, "eval")
        _, grad = mx.combined_loss(y, preds.data[:, 0], cfg)
        tape.backward(preds, seed_grad=grad[:, None])

    worst = 0.0
    for _, entry in model.params.entries():
        if not entry.trainable:
            continue
        auto = entry.tensor.grad
        flat = entry.tensor.data.reshape(-1)
        aflat = (auto if auto is not None else np.zeros_like(entry.tensor.data)).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_value()
            flat[i] = orig - eps
            fm = loss_value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8))
    return worst


def run_suite(trials=10, eps=1e-5, seed=0):
    """Full table: [(name, worst_rel_err, tolerance), ...]."""
    rows = [(n, e, PRIMITIVE_TOLERANCE) for n, e in check_primitives(trials, eps, seed)]
    rows += [(n, e, MODEL_TOLERANCE) for n, e in check_model(eps)]
    return rows
