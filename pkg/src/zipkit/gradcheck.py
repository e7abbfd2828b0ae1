"""Finite-difference gradient certification.

The oracle is central differences at h=1e-5 in float64, evaluated through
the forward code only (the backward rules under test never run on the
oracle side). Comparisons use the L2-relative error between the numeric
and tape gradients; a pair whose norms are both below ``ZERO_NORM`` counts
as a vacuous pass (both effectively zero).

``run_scope`` drives the named certification suites used by the CLI:
activations, norms, constraints, blocks, encoder, or all.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import nn, tensor as tz

H_DEFAULT = 1e-5
ZERO_NORM = 5e-8


def numeric_gradient(f, x, h=H_DEFAULT):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    ``f`` must treat its argument as read-only; perturbation happens on a
    scratch copy.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    scratch = flat.copy()
    for i in range(flat.size):
        orig = scratch[i]
        scratch[i] = orig + h
        fp = f(scratch.reshape(x.shape))
        scratch[i] = orig - h
        fm = f(scratch.reshape(x.shape))
        scratch[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_gradient_at(f, x, coords, h=H_DEFAULT):
    """Central differences at selected flat coordinates only."""
    x = np.asarray(x, dtype=np.float64)
    scratch = x.copy().reshape(-1)
    out = np.zeros(len(coords))
    for k, i in enumerate(coords):
        orig = scratch[i]
        scratch[i] = orig + h
        fp = f(scratch.reshape(x.shape))
        scratch[i] = orig - h
        fm = f(scratch.reshape(x.shape))
        scratch[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def rel_error(numeric, analytic):
    """L2-relative disagreement; 0.0 when both sides are negligibly zero."""
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic))
    if scale < ZERO_NORM:
        return 0.0
    return float(np.linalg.norm(numeric - analytic) / scale)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def check_unary_op(op, seed, tol, size=16, scale=1.0, h=H_DEFAULT):
    """Certifies an elementwise Tensor->Tensor op on one random input."""
    rng = np.random.default_rng(seed)
    x0 = scale * rng.standard_normal(size)
    w = rng.standard_normal(size)

    def f(xv):
        with tz.no_grad():
            return float(np.sum(w * op(tz.Tensor(xv)).data))

    xt = tz.Tensor(x0, requires_grad=True)
    loss = tz.tsum(tz.mul(op(xt), tz.Tensor(w)))
    tz.backward(loss)
    return rel_error(numeric_gradient(f, x0, h), xt.grad)


def check_value_grad(make_loss, x0, tol, h=H_DEFAULT):
    """Certifies d(make_loss)/dx for a scalar-valued tensor function.

    ``make_loss`` maps a Tensor to a scalar Tensor and is also used as its
    own forward evaluator for the numeric side.
    """
    def f(xv):
        with tz.no_grad():
            return float(make_loss(tz.Tensor(xv)).data)

    xt = tz.Tensor(x0, requires_grad=True)
    tz.backward(make_loss(xt))
    return rel_error(numeric_gradient(f, x0, h), xt.grad)


def check_params_sampled(loss_fn, named_params, rng, n_coords=4, h=H_DEFAULT):
    """Certifies sampled coordinates of every parameter tensor.

    ``loss_fn()`` re-runs the forward from the current parameter values.
    The tape gradients must already be populated. Returns the worst
    per-tensor L2-relative error over the sampled coordinates.
    """
    worst = 0.0
    worst_name = None
    for name, p in named_params:
        size = p.data.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)

        def f_at(xv, p=p):
            old = p.data
            p.data = xv
            try:
                with tz.no_grad():
                    return loss_fn()
            finally:
                p.data = old

        fd = numeric_gradient_at(f_at, p.data, coords, h)
        ad = p.grad.reshape(-1)[coords] if p.grad is not None else np.zeros(len(coords))
        err = rel_error(fd, ad)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


# -- certification scopes -------------------------------------------------

def _scope_activations(seed, tol, n_seeds=20):
    out = []
    for label, op in [("swish", nn.swish), ("swooshr", nn.swooshr),
                      ("swooshl", nn.swooshl), ("sigmoid", tz.sigmoid),
                      ("tanh", tz.tanh)]:
        errs = [check_unary_op(op, seed + k, tol) for k in range(n_seeds)]
        out.append(CheckResult(f"activations/{label}", max(errs), tol))
    return out


def _scope_norms(seed, tol, n_seeds=8):
    out = []
    rng = np.random.default_rng(seed)
    errs_ln, errs_bn, errs_sm, errs_rs = [], [], [], []
    for _ in range(n_seeds):
        D = int(rng.integers(3, 9))
        lead = int(rng.integers(2, 5))
        x0 = rng.standard_normal((lead, D))
        w = rng.standard_normal((lead, D))
        lp = nn.LayerNormParams.create(D)
        lp.gamma.data = rng.standard_normal(D)
        lp.beta.data = rng.standard_normal(D)
        bp = nn.BiasNormParams.create(D)
        bp.bias.data = 0.5 * rng.standard_normal(D)
        bp.log_scale.data = np.asarray(0.3 * rng.standard_normal())

        errs_ln.append(check_value_grad(
            lambda x: tz.tsum(tz.mul(nn.layernorm(x, lp), tz.Tensor(w))), x0, tol))
        errs_bn.append(check_value_grad(
            lambda x: tz.tsum(tz.mul(nn.biasnorm(x, bp), tz.Tensor(w))), x0, tol))
        errs_sm.append(check_value_grad(
            lambda x: tz.tsum(tz.mul(tz.softmax_lastdim(x), tz.Tensor(w))), x0, tol))

        def stats_loss(x):
            m, v, r = tz.reduce_stats(x, 1)
            return tz.tsum(m) + tz.tsum(v) + tz.tsum(r)
        errs_rs.append(check_value_grad(stats_loss, x0 + 2.0, tol))
    out.append(CheckResult("norms/layernorm", max(errs_ln), tol))
    out.append(CheckResult("norms/biasnorm", max(errs_bn), tol))
    out.append(CheckResult("norms/softmax", max(errs_sm), tol))
    out.append(CheckResult("norms/reduce_stats", max(errs_rs), tol))
    return out


def _scope_constraints(seed, tol, n_seeds=8):
    from . import constraints

    out = []
    rng = np.random.default_rng(seed)
    cfg = constraints.BalancerConfig(a_min=0.5, a_max=0.8, p_min=0.3, p_max=0.6)
    errs_b, errs_w = [], []
    for _ in range(n_seeds):
        x0 = rng.standard_normal((12, 5)) + 0.5 * rng.standard_normal(5)
        errs_b.append(check_value_grad(
            lambda x: constraints.balancer_penalty(x, cfg), x0, tol))
        x1 = rng.standard_normal((12, 5)) @ np.diag([3.0, 1.0, 0.5, 0.2, 1.5])
        errs_w.append(check_value_grad(
            lambda x: constraints.whitener_metric(x), x1, tol))
    out.append(CheckResult("constraints/balancer_penalty", max(errs_b), tol))
    out.append(CheckResult("constraints/whitener_metric", max(errs_w), tol))
    return out


def _module_check(module, x0, fwd, rng, tol, n_coords=4):
    """FD check of a model module wrt its input and all its parameters."""
    w = rng.standard_normal(fwd(tz.Tensor(x0)).shape)

    def loss_fn():
        return float(np.sum(w * fwd(tz.Tensor(x0)).data))

    err_in = check_value_grad(
        lambda x: tz.tsum(tz.mul(fwd(x), tz.Tensor(w))), x0, tol)
    xt = tz.Tensor(x0, requires_grad=True)
    for _, p in module.named_parameters():
        p.zero_grad()
    tz.backward(tz.tsum(tz.mul(fwd(xt), tz.Tensor(w))))
    err_p, _ = check_params_sampled(loss_fn, module.named_parameters(),
                                    rng, n_coords)
    return max(err_in, err_p)


def _scope_blocks(seed, tol):
    from . import zipformer

    rng = np.random.default_rng(seed)
    T, D = 6, 16
    cfg = zipformer.tiny_config()
    out = []

    mhaw = zipformer.MHAW(D, num_heads=2, query_dim=4,
                          pos_range=cfg.pos_bias_range, rng=rng)
    mhaw.pos_bias.data = 0.1 * rng.standard_normal(mhaw.pos_bias.data.shape)
    x0 = rng.standard_normal((T, D))
    out.append(CheckResult(
        "blocks/mhaw",
        _module_check(mhaw, x0, lambda x: mhaw.forward(x), rng, tol), tol))

    sa = zipformer.SelfAttention(D, num_heads=2, value_dim=3, rng=rng)
    wts = zipformer.MHAW(D, 2, 4, cfg.pos_bias_range, rng=rng)
    out.append(CheckResult(
        "blocks/self_attention",
        _module_check(sa, x0, lambda x: sa.forward(x, wts.forward(x)), rng, tol),
        tol))

    nla = zipformer.NonlinearAttention(D, rng=rng)
    out.append(CheckResult(
        "blocks/nonlinear_attention",
        _module_check(nla, x0, lambda x: nla.forward(x, wts.forward(x)), rng, tol),
        tol))

    ff = zipformer.FeedForward(D, 12, rng=rng)
    out.append(CheckResult(
        "blocks/feed_forward",
        _module_check(ff, x0, lambda x: ff.forward(x), rng, tol), tol))

    conv = zipformer.ConvModule(D, kernel_size=5, rng=rng)
    out.append(CheckResult(
        "blocks/conv_module",
        _module_check(conv, x0, lambda x: conv.forward(x), rng, tol), tol))

    block = zipformer.ZipformerBlock(
        dim=D, ff_mid_dim=12, num_heads=2, conv_kernel=5,
        query_dim=4, value_dim=3, pos_range=8, rng=rng)
    out.append(CheckResult(
        "blocks/zipformer_block",
        _module_check(block, x0, lambda x: block.forward(x, step=0), rng, tol),
        tol))
    return out


def _scope_encoder(seed, tol):
    from . import zipformer

    rng = np.random.default_rng(seed)
    cfg = zipformer.tiny_config()
    out = []

    embed = zipformer.ConvEmbed(cfg, rng=np.random.default_rng(seed + 1))
    f0 = rng.standard_normal((10, cfg.input_feature_dim))
    out.append(CheckResult(
        "encoder/conv_embed",
        _module_check(embed, f0, lambda x: embed.forward(x), rng, tol), tol))

    enc = zipformer.ZipformerEncoder(cfg, seed=seed + 2)
    f1 = rng.standard_normal((16, cfg.input_feature_dim))
    out.append(CheckResult(
        "encoder/tiny_encoder",
        _module_check(enc, f1, lambda x: enc.forward(x, step=0), rng, tol,
                      n_coords=3),
        tol))
    return out


SCOPES = {
    "activations": _scope_activations,
    "norms": _scope_norms,
    "constraints": _scope_constraints,
    "blocks": _scope_blocks,
    "encoder": _scope_encoder,
}


def run_scope(scope, seed=0, tol=1e-4):
    """Runs one certification scope (or 'all'); returns CheckResults."""
    if scope == "all":
        names = list(SCOPES)
    elif scope in SCOPES:
        names = [scope]
    else:
        raise ValueError(f"unknown gradcheck scope: {scope!r}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        results.extend(SCOPES[name](seed, tol))
        _ = time.perf_counter() - t0
    return results


def format_report(results):
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:34s} max_rel_err={r.max_rel_err:.3e}  tol={r.tol:g}")
    n_bad = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_bad}/{len(results)} checks passed")
    return "\n".join(lines)
