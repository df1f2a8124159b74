"""Finite-difference audits of every hand-written backward pass."""
from __future__ import annotations

import dataclasses

import numpy as np

from .contrastive import ProjectionHead, contrastive_grad, contrastive_loss
from .model import Batch, Model, ModelConfig
from .numerics import GradCheckReport, finite_difference_check, layer_norm, layer_norm_backward
from .tcn import TcnStack

TAUS = (0.07, 0.5, 1.0)


def merge_reports(reports: list[GradCheckReport]) -> GradCheckReport:
    return GradCheckReport(
        max_abs_error=max(r.max_abs_error for r in reports),
        max_rel_error=max(r.max_rel_error for r in reports),
        parameter_count=sum(r.parameter_count for r in reports),
        passed=all(r.passed for r in reports),
        tolerance=reports[0].tolerance,
    )


def _check(f, grad, point, tol, step) -> GradCheckReport:
    return finite_difference_check(f, grad, point, step=step, tolerance=tol)


def audit_contrastive(rng, n=10, tol=1e-4, step=1e-5, inject_bug=False) -> dict[str, GradCheckReport]:
    anchor_reports, target_reports = [], []
    for k in range(n):
        b = int(rng.integers(2, 7))
        p = int(rng.integers(3, 9))
        tau = TAUS[k % len(TAUS)]
        a = rng.normal(size=(b, p))
        t = rng.normal(size=(b, p))
        labels = rng.integers(0, 3, size=b)
        labels[:2] = [0, 1]  # at least one negative pair
        da, dt = contrastive_grad(a, t, labels, tau)
        if inject_bug:
            da = da * 1.1
        anchor_reports.append(_check(
            lambda x: contrastive_loss(x.reshape(a.shape), t, labels, tau)[0], da, a, tol, step))
        target_reports.append(_check(
            lambda x: contrastive_loss(a, x.reshape(t.shape), labels, tau)[0], dt, t, tol, step))
    return {"contrastive.anchor": merge_reports(anchor_reports),
            "contrastive.target": merge_reports(target_reports)}


def _param_closure(arr: np.ndarray, loss):
    def f(x):
        saved = arr.copy()
        arr[...] = x.reshape(arr.shape)
        try:
            return loss()
        finally:
            arr[...] = saved
    return f


def audit_tcn(rng, n=10, tol=1e-4, step=1e-5) -> dict[str, GradCheckReport]:
    per_block: dict[str, list[GradCheckReport]] = {}
    for k in range(n):
        c_in = int(rng.integers(1, 4))
        stack = TcnStack.build(c_in, [3, 2], kernel_size=int(rng.integers(1, 4)), dilations=[1, 2], rng=rng,
                               pooling=("last", "mean")[k % 2], residual=bool(k % 3 == 0))
        for layer in stack.layers:
            layer.bias[:] = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=(int(rng.integers(1, 7)), c_in))
        up = rng.normal(size=stack.out_channels)
        stack.forward(x)
        grads, dx = stack.backward(up)

        def loss(xx=x):
            return float(up @ stack.forward(xx))
        for name, arr in stack.params().items():
            per_block.setdefault(name, []).append(_check(_param_closure(arr, loss), grads[name], arr, tol, step))
        per_block.setdefault("tcn.input", []).append(
            _check(lambda v: loss(v.reshape(x.shape)), dx, x, tol, step))
    return {name: merge_reports(r) for name, r in per_block.items()}


def audit_projection(rng, n=10, tol=1e-4, step=1e-5) -> dict[str, GradCheckReport]:
    per_block: dict[str, list[GradCheckReport]] = {}
    for _ in range(n):
        q, p, b = (int(v) for v in rng.integers(2, 6, size=3))
        head = ProjectionHead.init(q, p, rng)
        head.linear.bias[:] = rng.normal(size=p)
        x = rng.normal(size=(b, q))
        up = rng.normal(size=(b, p))

        def loss(xx=x):
            return float((up * head.forward(xx)).sum())
        loss()
        dw, db, dx = head.backward(up)
        for name, arr, g in (("projection.weight", head.linear.weight, dw), ("projection.bias", head.linear.bias, db)):
            per_block.setdefault(name, []).append(_check(_param_closure(arr, loss), g, arr, tol, step))
        per_block.setdefault("projection.input", []).append(
            _check(lambda v: loss(v.reshape(x.shape)), dx, x, tol, step))
    return {name: merge_reports(r) for name, r in per_block.items()}


def audit_layer_norm(rng, n=10, tol=1e-4, step=1e-5) -> dict[str, GradCheckReport]:
    reports = []
    for _ in range(n):
        # d=2 normalizes to +-1 whatever the input, leaving only round-off to compare
        d = int(rng.integers(3, 8))
        x = rng.normal(size=(3, d))
        gain = rng.normal(size=d)
        shift = rng.normal(size=d)
        up = rng.normal(size=(3, d))
        dx, dg, ds = layer_norm_backward(up, x, gain)
        reports.append(_check(lambda v: float((up * layer_norm(v.reshape(x.shape), gain, shift)).sum()), dx, x, tol, step))
        reports.append(_check(lambda v: float((up * layer_norm(x, v, shift)).sum()), dg, gain, tol, step))
        reports.append(_check(lambda v: float((up * layer_norm(x, gain, v)).sum()), ds, shift, tol, step))
    return {"layer_norm": merge_reports(reports)}


def tiny_model_config(base: ModelConfig | None = None, seed: int = 0) -> ModelConfig:
    """Shrink ``base`` to d=4, p=4, C=2 and 3 frames, keeping its other settings."""
    base = base or ModelConfig(layer_norm=True, beta_cl=0.5)
    tcn = dataclasses.replace(base.tcn, channels=[4] * len(base.tcn.dilations))
    return dataclasses.replace(base, text_dim=5, audio_dim=3, visual_dim=4, proj_dim=4, num_classes=2,
                               frame_count=3, tcn=tcn, batch_size=2, seed=seed)


def random_batch(cfg: ModelConfig, rng, size: int = 2) -> Batch:
    labels = np.arange(size) % cfg.num_classes
    return Batch(text=rng.normal(size=(size, cfg.text_dim)),
                 audio=rng.normal(size=(size, cfg.audio_dim)),
                 frames=rng.normal(size=(size, cfg.frame_count, cfg.visual_dim)),
                 labels=labels)


def audit_pipeline(cfg: ModelConfig, rng, tol=1e-4, step=1e-5, batch_size=2) -> dict[str, GradCheckReport]:
    """Check every parameter block of the full model with the VSC routing pinned."""
    model = Model(cfg)
    for arr in model.params().values():
        # move off the all-zero bias init so no ReLU sits exactly on its kink
        arr += 0.1 * rng.normal(size=arr.shape)
    batch = random_batch(cfg, rng, batch_size)
    _, fwd = model.loss(batch)
    routing = [(p.relevant_indices, p.merge_map) for p in fwd.partitions]
    grads = model.backward(batch, fwd)

    def loss():
        return model.loss(batch, routing)[0].total
    return {f"pipeline.{name}": _check(_param_closure(arr, loss), grads[name], arr, tol, step)
            for name, arr in model.params().items()}


def run_all(seed: int = 0, model_cfg: ModelConfig | None = None, tol=1e-4, step=1e-5, n=10,
            inject_bug=False) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = {}
    out.update(audit_contrastive(rng, n, tol, step, inject_bug=inject_bug))
    out.update(audit_tcn(rng, n, tol, step))
    out.update(audit_projection(rng, n, tol, step))
    out.update(audit_layer_norm(rng, n, tol, step))
    out.update(audit_pipeline(tiny_model_config(model_cfg, seed), rng, tol, step))
    return out
