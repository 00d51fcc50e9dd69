"""Built-in verification suites: gradient checks for every operator,
parameter-count assertions, shape oracles, and the normalization identity.

These back the ``verify`` CLI command and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as M
from . import nn
from . import tensor as T
from .gradcheck import gradcheck
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64, requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05) -> Tensor:
    x = rng.standard_normal(shape)
    x = np.sign(x) * (np.abs(x) + margin)
    return Tensor(x, dtype=np.float64, requires_grad=True)


def operator_gradchecks(tol: float = 1e-4) -> list[tuple[str, object]]:
    """(name, report) for a finite-difference check of every operator."""
    rng = np.random.default_rng(7)
    checks: list[tuple[str, object]] = []

    def run(name, f, xs, tol=tol, **kw):
        checks.append((name, gradcheck(f, xs, tol=tol, **kw)))

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    run("add", lambda x, y: (x + y).sum(), [a, b])
    run("sub", lambda x, y: (x - y).sum(), [_t(rng, 3, 4), _t(rng, 3, 4)])
    run("mul", lambda x, y: (x * y).sum(), [_t(rng, 3, 4), _t(rng, 3, 4)])
    run("mul_broadcast", lambda x, y: (x * y).sum(), [_t(rng, 2, 3, 4), _t(rng, 1, 3, 1)])
    run("div", lambda x, y: (x / y).sum(), [_t(rng, 3, 4), _away_from_zero(rng, 3, 4, margin=0.5)])
    run("leaky_relu", lambda x: T.leaky_relu(x, 0.2).sum(), [_away_from_zero(rng, 4, 5)],
        tol=1e-6)
    run("gelu", lambda x: T.gelu(x).sum(), [_t(rng, 4, 5)])
    run("exp", lambda x: T.texp(x).sum(), [_t(rng, 3, 3)])
    run("log", lambda x: T.tlog(x).sum(),
        [Tensor(rng.uniform(0.5, 2.0, (3, 3)), dtype=np.float64, requires_grad=True)])
    run("sqrt", lambda x: T.tsqrt(x).sum(),
        [Tensor(rng.uniform(0.5, 2.0, (3, 3)), dtype=np.float64, requires_grad=True)])
    run("matmul", lambda x, y: T.matmul(x, y).sum(), [_t(rng, 4, 5), _t(rng, 5, 3)],
        tol=1e-5)
    run("matmul_batched", lambda x, y: T.matmul(x, y).sum(), [_t(rng, 2, 4, 5), _t(rng, 5, 3)])
    run("reshape", lambda x: (T.reshape(x, (6, 2)) * 2.0).sum(), [_t(rng, 3, 4)])
    run("flatten", lambda x: T.flatten(x).sum(), [_t(rng, 2, 3, 2)])
    run("transpose", lambda x: (T.transpose(x, (1, 0)) * 3.0).sum(), [_t(rng, 3, 4)])
    run("concat", lambda x, y: T.concat([x, y], axis=1).sum(), [_t(rng, 2, 3), _t(rng, 2, 2)])
    run("pad3d", lambda x: (T.pad3d(x, ((1, 2), (0, 1), (2, 0))) * 2.0).sum(),
        [_t(rng, 1, 1, 2, 3, 2)])
    run("getitem", lambda x: x[:, 1:3].sum(), [_t(rng, 2, 4)])
    run("sum_axis", lambda x: (x.sum(axis=1) * 2.0).sum(), [_t(rng, 3, 4)])
    run("mean_axis", lambda x: (x.mean(axis=(1, 2)) * 2.0).sum(), [_t(rng, 2, 3, 4)])
    run("softmax", lambda x: (T.softmax(x) * T.softmax(x)).sum(), [_t(rng, 3, 5)])

    w = _t(rng, 4, 8, scale=0.3)
    bias = _t(rng, 4, scale=0.1)
    run("linear", lambda x, ww, bb: nn.linear(x, ww, bb).sum(), [_t(rng, 5, 8), w, bias],
        tol=1e-5)

    cw = _t(rng, 2, 2, 3, 3, 3, scale=0.2)
    cb = _t(rng, 2, scale=0.1)
    run("conv3d", lambda x, ww, bb: nn.conv3d(x, ww, bb, stride=1, padding=1).sum(),
        [_t(rng, 1, 2, 5, 5, 5), cw, cb])
    run("conv3d_stride2",
        lambda x, ww: nn.conv3d(x, ww, stride=2, padding=1).sum(),
        [_t(rng, 1, 2, 6, 6, 6), _t(rng, 3, 2, 3, 3, 3, scale=0.2)])
    run("maxpool3d", lambda x: nn.maxpool3d(x, 3, 2).sum(),
        [_t(rng, 1, 2, 6, 6, 6)])
    run("adaptive_avg_pool3d", lambda x: nn.adaptive_avg_pool3d(x, (2, 2, 2)).sum(),
        [_t(rng, 1, 2, 5, 6, 7)])

    # norms are checked through a fixed projection: sum(norm(x)^2) is constant
    # by construction, so its true gradient is ~0 and relative error meaningless
    inorm = nn.InstanceNorm3d(3, dtype=np.float64)
    proj_i = Tensor(rng.standard_normal((1, 3, 4, 4, 4)))
    run("instancenorm3d",
        lambda x, g, bb: (_with_affine(inorm, g, bb)(x) * proj_i).sum(),
        [_t(rng, 1, 3, 4, 4, 4), inorm.gamma, inorm.beta])

    bnorm = nn.BatchNorm3d(2, dtype=np.float64)
    proj_b = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
    run("batchnorm3d", lambda x: (bnorm(x) * proj_b).sum(), [_t(rng, 2, 2, 3, 3, 3)])

    lnorm = nn.LayerNorm(8, dtype=np.float64)
    proj_l = Tensor(rng.standard_normal((4, 8)))
    run("layer_norm", lambda x: (lnorm(x) * proj_l).sum(), [_t(rng, 4, 8)], tol=1e-5)

    attn = nn.MultiHeadAttention(4, 2, rng=np.random.default_rng(3), dtype=np.float64)
    run("multi_head_attention", lambda x: (attn(x) * attn(x)).sum(), [_t(rng, 1, 3, 4)])

    enc = nn.TransformerEncoder(4, 2, depth=1, rng=np.random.default_rng(4), dtype=np.float64)
    proj_e = Tensor(rng.standard_normal((1, 3, 4)))
    run("transformer_encoder", lambda x: (enc(x) * proj_e).sum(), [_t(rng, 1, 3, 4)],
        tol=1e-4)

    labels = np.array([0, 1, 0])
    run("cross_entropy", lambda x: nn.cross_entropy(x, labels), [_t(rng, 3, 2)], tol=1e-6)

    def dropout_frozen(x):
        # identical mask every evaluation: the rng is re-seeded inside the closure
        return (nn.dropout3d(x, 0.4, True, np.random.default_rng(11)) * 2.0).sum()

    run("dropout3d_frozen_mask", dropout_frozen, [_t(rng, 1, 6, 2, 2, 2)])
    run("vvit_patchify", lambda x: (M.vvit_patchify(x, 2) * 2.0).sum(),
        [_t(rng, 1, 1, 3, 4, 3)])
    return checks


def _with_affine(layer, gamma, beta):
    layer.gamma, layer.beta = gamma, beta
    return layer


def suite_gradcheck() -> list[CheckResult]:
    results = []
    for name, report in operator_gradchecks():
        results.append(CheckResult(f"gradcheck.{name}", report.passed,
                                   f"max_rel_err={report.max_rel_err:.3e} tol={report.tol:g}"))
    return results


def suite_params() -> list[CheckResult]:
    results = []
    vvit = M.build_model(M.build_config("vvit", "tiny"))
    counts = M.param_count(vvit)
    results.append(CheckResult(
        "params.vvit_tiny_embedding_24000192",
        counts["embedding"] == 24_000_192, f"got {counts['embedding']}"))
    enc = counts["encoder"]
    results.append(CheckResult(
        "params.encoder_tiny_within_10pct_of_5.3M",
        abs(enc - 5_300_000) <= 530_000, f"got {enc}"))
    cvvt = M.build_model(M.build_config("cvvt", "tiny"))
    c = M.param_count(cvvt)
    results.append(CheckResult(
        "params.cvvt_tiny_embedding_in_band",
        500_000 <= c["embedding"] <= 3_000_000, f"got {c['embedding']}"))
    results.append(CheckResult(
        "params.cvvt_embedding_smaller_than_encoder",
        c["embedding"] < c["encoder"], f"embed {c['embedding']} vs encoder {c['encoder']}"))
    results.append(CheckResult(
        "params.vvit_imbalance_ratio_over_4",
        counts["embedding"] / enc > 4, f"ratio {counts['embedding'] / enc:.2f}"))
    return results


def suite_shapes() -> list[CheckResult]:
    results = []
    trace = dict(M.shape_infer(M.build_config("vvit", "tiny")))
    results.append(CheckResult("shapes.vvit_80_patches",
                               trace["patchify"][1] == 80, f"got {trace['patchify']}"))
    trace = dict(M.shape_infer(M.build_config("cvvt", "tiny")))
    results.append(CheckResult("shapes.cvvt_feature_grid_80x10x10x10",
                               trace["embed.adaptive_pool"] == (1, 80, 10, 10, 10),
                               f"got {trace['embed.adaptive_pool']}"))
    results.append(CheckResult("shapes.cvvt_80_tokens",
                               trace["token_embed"][1] == 80, f"got {trace['token_embed']}"))
    trace = dict(M.shape_infer(M.build_config("convnet3d4")))
    ok = (trace["block4.pool"] == (1, 512, 2, 2, 2) and trace["flatten"] == (1, 4096)
          and trace["embed"] == (1, 512))
    results.append(CheckResult("shapes.convnet_full_trace_512x2x2x2_4096_512", ok,
                               f"block4.pool={trace['block4.pool']} "
                               f"flatten={trace['flatten']} embed={trace['embed']}"))
    try:
        M.shape_infer(M.build_config("convnet3d4", extents=(8, 8, 8)))
        results.append(CheckResult("shapes.convnet_8cubed_underflows", False, "no error raised"))
    except M.ShapeUnderflowError as e:
        results.append(CheckResult("shapes.convnet_8cubed_underflows",
                                   e.layer == "block2.pool", f"raised at {e.layer}"))
    return results


def suite_norms(n_inputs: int = 100, tol: float = 1e-5) -> list[CheckResult]:
    """batchnorm3d in training mode at batch 1 must match instancenorm3d."""
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(n_inputs):
        c = int(rng.integers(1, 5))
        sp = tuple(rng.integers(2, 6, size=3))
        x = rng.standard_normal((1, c) + sp).astype(np.float32) * rng.uniform(0.5, 3.0)
        gamma = rng.standard_normal(c).astype(np.float32)
        beta = rng.standard_normal(c).astype(np.float32)
        bn = nn.BatchNorm3d(c)
        inorm = nn.InstanceNorm3d(c)
        for layer in (bn, inorm):
            layer.gamma.data[:] = gamma
            layer.beta.data[:] = beta
        bn.train()
        diff = float(np.abs(bn(Tensor(x)).data - inorm(Tensor(x)).data).max())
        worst = max(worst, diff)
    return [CheckResult("norms.batchnorm_n1_equals_instancenorm", worst < tol,
                        f"max abs diff {worst:.2e} over {n_inputs} inputs (tol {tol:g})")]


SUITES = {
    "gradcheck": suite_gradcheck,
    "params": suite_params,
    "shapes": suite_shapes,
    "norms": suite_norms,
}


def run_suites(names: list[str]) -> tuple[list[CheckResult], bool]:
    results: list[CheckResult] = []
    for name in names:
        results.extend(SUITES[name]())
    return results, all(r.passed for r in results)
