"""Finite-difference validation of every op and the end-to-end objective.

Two entry points: run_op_checks exercises each differentiable op in
isolation on small random inputs, and run_model_checks differentiates
the full training loss of every system configuration with respect to
every parameter tensor, sweeping all coordinates.  Both return
(name, max relative error) pairs measured against central differences.
"""

from dataclasses import replace

import numpy as np

from .diffcore import (
    BatchNormState,
    Tensor,
    add,
    affine,
    batchnorm1d,
    dilated_conv1d,
    gather_cols,
    grad_check,
    l2_sum,
    mse_sq,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    stats_pool,
    sum_all,
)
from .model import (
    TAPS,
    AuxBranchSpec,
    ModelSpec,
    aux_mse_loss,
    aux_predictions,
    aux_target_dims,
    build_model,
    forward,
    gtm_regularizer,
    total_loss,
)

THRESHOLD = 1e-4

# same kernel/dilation geometry as the default stack, narrow everywhere
TINY_FRAME_LAYERS = ((4, 5, 1), (4, 3, 2), (4, 3, 3), (4, 1, 1), (8, 1, 1))


def _away_from_zero(values, margin):
    """Shift entries off the origin so kinks stay out of h-balls."""
    return values + np.where(values >= 0.0, margin, -margin)


def run_op_checks(seed=0, h=1e-5):
    """Gradient-check each op against central differences.

    Non-scalar ops are reduced through a fixed quadratic head so every
    output coordinate influences the objective.  Returns a list of
    (check name, max relative error).
    """
    rng = np.random.default_rng(seed)
    results = []

    def check(name, build, leaf):
        results.append((name, grad_check(build, leaf, h=h)))

    def quad(out, target):
        return mse_sq(out, Tensor(target))

    # affine, with and without bias
    x = Tensor(rng.standard_normal((3, 4)))
    w = Tensor(rng.standard_normal((4, 5)))
    b = Tensor(rng.standard_normal(5))
    t = rng.standard_normal((3, 5))
    check("affine/x", lambda v: quad(affine(v, w, b), t), x)
    check("affine/w", lambda v: quad(affine(x, v, b), t), w)
    check("affine/b", lambda v: quad(affine(x, w, v), t), b)
    check("affine-nobias/x", lambda v: quad(affine(v, w), t), x)
    check("affine-nobias/w", lambda v: quad(affine(x, v), t), w)

    # dilated convolution, single sequence and batched
    cx = Tensor(rng.standard_normal((9, 3)))
    ck = Tensor(rng.standard_normal((3, 3, 4)))
    cb = Tensor(rng.standard_normal(4))
    ct = rng.standard_normal((5, 4))
    check("conv/x", lambda v: quad(dilated_conv1d(v, ck, cb, 2), ct), cx)
    check("conv/kernel", lambda v: quad(dilated_conv1d(cx, v, cb, 2), ct), ck)
    check("conv/bias", lambda v: quad(dilated_conv1d(cx, ck, v, 2), ct), cb)
    bx = Tensor(rng.standard_normal((2, 8, 3)))
    bk = Tensor(rng.standard_normal((2, 3, 4)))
    bt = rng.standard_normal((2, 7, 4))
    check("conv-batched/x", lambda v: quad(dilated_conv1d(v, bk, cb, 1), bt),
          bx)
    check("conv-batched/kernel",
          lambda v: quad(dilated_conv1d(bx, v, cb, 1), bt), bk)

    # relu, inputs shifted off the kink
    rx = Tensor(_away_from_zero(rng.standard_normal((3, 4)), 0.2))
    rt = rng.standard_normal((3, 4))
    check("relu/x", lambda v: quad(relu(v), rt), rx)

    # batch normalization in both modes
    state = BatchNormState(3)
    state.gamma.values[:] = rng.uniform(0.5, 1.5, 3)
    state.beta.values[:] = rng.standard_normal(3)
    state.running_mean[:] = rng.standard_normal(3)
    state.running_var[:] = rng.uniform(0.5, 2.0, 3)
    nx = Tensor(rng.standard_normal((4, 3)))
    nt = rng.standard_normal((4, 3))
    for mode in ("train", "eval"):
        check(f"batchnorm-{mode}/x",
              lambda v, m=mode: quad(batchnorm1d(v, state, m), nt), nx)
        check(f"batchnorm-{mode}/gamma",
              lambda v, m=mode: quad(batchnorm1d(nx, state, m), nt),
              state.gamma)
        check(f"batchnorm-{mode}/beta",
              lambda v, m=mode: quad(batchnorm1d(nx, state, m), nt),
              state.beta)

    # statistics pooling
    px = Tensor(rng.standard_normal((6, 3)))
    pt = rng.standard_normal(6)
    check("stats_pool/x", lambda v: quad(stats_pool(v), pt), px)
    qx = Tensor(rng.standard_normal((2, 6, 3)))
    qt = rng.standard_normal((2, 6))
    check("stats_pool-batched/x", lambda v: quad(stats_pool(v), qt), qx)

    # scalar losses
    logits = Tensor(rng.standard_normal((3, 5)))
    labels = np.array([0, 2, 4])
    check("softmax_cross_entropy/logits",
          lambda v: softmax_cross_entropy(v, labels), logits)
    ma = Tensor(rng.standard_normal((3, 4)))
    mb = Tensor(rng.standard_normal((3, 4)))
    check("mse_sq/a", lambda v: mse_sq(v, mb), ma)
    check("mse_sq/b", lambda v: mse_sq(ma, v), mb)
    la = Tensor(rng.standard_normal((3, 4)))
    # keep every row gap well away from the norm kink at zero
    lb = Tensor(la.values + _away_from_zero(rng.standard_normal((3, 4)), 0.5))
    check("l2_sum/a", lambda v: l2_sum(v, lb), la)
    check("l2_sum/b", lambda v: l2_sum(la, v), lb)

    # structural ops
    gm = Tensor(rng.standard_normal((4, 6)))
    gidx = np.array([0, 5, 2])
    gt = rng.standard_normal((3, 4))
    check("gather_cols/m", lambda v: quad(gather_cols(v, gidx), gt), gm)
    aa = Tensor(rng.standard_normal((3, 2)))
    ab = Tensor(rng.standard_normal((3, 2)))
    at = rng.standard_normal((3, 2))
    check("add/a", lambda v: quad(add(v, ab), at), aa)
    check("add/b", lambda v: quad(add(aa, v), at), ab)
    check("scale/x", lambda v: quad(scale(v, 0.7), at), aa)
    sx = Tensor(rng.standard_normal((2, 6)))
    st = rng.standard_normal((3, 4))
    check("reshape/x", lambda v: quad(reshape(v, (3, 4)), st), sx)
    check("sum_all/x", sum_all, Tensor(rng.standard_normal((3, 4))))
    return results


def model_configurations():
    """System matrix for end-to-end checks: (name, variant, aux, bias)."""
    configs = [
        ("baseline", "baseline", None, True),
        ("gtm", "gtm", None, False),
    ]
    for mode in ("f0", "f1"):
        for tap in TAPS:
            aux = AuxBranchSpec(mode=mode, tap=tap, projection_dim=5)
            configs.append((f"gncn-{mode}-{tap}", "gncn", aux, True))
    return configs


def run_model_checks(seed=0, h=1e-5):
    """Differentiate the full training loss of every configuration.

    Every parameter tensor is checked over all coordinates on a tiny
    model and a 2-utterance batch.  Returns (config name, max relative
    error) with the max taken over all parameters.
    """
    rng = np.random.default_rng([seed, 3])
    base = ModelSpec(num_speakers=3, feature_dim=4,
                     frame_layers=TINY_FRAME_LAYERS, embed_dims=(6, 6))
    # one frame more than the receptive field keeps two pooled frames
    batch = rng.standard_normal((2, base.receptive_field + 1, 4))
    labels = np.array([0, 2])

    results = []
    for name, variant, aux_spec, classifier_bias in model_configurations():
        spec = replace(base, classifier_bias=classifier_bias)
        model = build_model(spec, aux=aux_spec, seed=seed)
        targets = None
        if aux_spec is not None:
            trng = np.random.default_rng([seed, 5])
            targets = {
                layer: trng.standard_normal((2, dim))
                for layer, dim in sorted(
                    aux_target_dims(spec, aux_spec).items())
            }

        def loss_fn(_):
            record = forward(model, batch, "train")
            ce = softmax_cross_entropy(record.logits, labels)
            if variant == "baseline":
                return total_loss(ce, None, 0.0, "baseline")
            if variant == "gtm":
                aux = gtm_regularizer(model.params["classifier.weight"],
                                      record.classifier_input, labels)
                return total_loss(ce, aux, 0.05, "gtm")
            aux = aux_mse_loss(aux_predictions(model, record), targets,
                               len(batch))
            return total_loss(ce, aux, 0.1, "gncn")

        worst = 0.0
        for param in model.params.values():
            worst = max(worst, grad_check(loss_fn, param, h=h))
        results.append((name, worst))
    return results
