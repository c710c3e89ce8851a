"""Heatmap-to-box detector: a small conv stem plus transformer regressing one box.

Input is a 4-channel canvas (normalized heatmap, validity mask, x and y
coordinate grids). The stem downsamples 32 -> 16 -> 8 -> 4, the resulting 16
tokens pass through a two-layer self-attention encoder, a single learned
query cross-attends to them, and a small head emits a center-size box
through a sigmoid.

Everything trains in float32 through the autodiff tape; the gradient check
rebuilds the same model in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import boxes as bx
from .metrics import HeatMap

CANVAS = 32
STEM_CHANNELS = (64, 128, 256)
GN_GROUPS = 8
WIDTH = 256
N_HEADS = 8
FF_WIDTH = 512
N_ENC_LAYERS = 2
N_DEC_LAYERS = 2
N_TOKENS = 16  # 4x4 after three stride-2 convs


def scheduled_lr(base_lr: float, step_count: int, total_steps: int,
                 warmup_steps: int, cosine_decay: bool) -> float:
    """Learning rate for a 1-based optimizer step.

    Linear warmup, then an optional cosine ramp down to zero at
    ``total_steps``. Depends only on the step count so a resumed run
    follows the same schedule.
    """
    lr = base_lr
    if warmup_steps > 0:
        lr *= min(1.0, step_count / warmup_steps)
    if cosine_decay and total_steps > warmup_steps:
        frac = (step_count - warmup_steps) / (total_steps - warmup_steps)
        if frac > 0.0:
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return lr


@dataclass
class DetectorHyper:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 100
    cosine_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1000

    def lr_at(self, step_count: int) -> float:
        return scheduled_lr(self.lr, step_count, self.steps,
                            self.warmup_steps, self.cosine_decay)


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the last good state."""

    def __init__(self, step: int, last_good: "TrainState | None"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


def build_input(heat: HeatMap, canvas: int = CANVAS) -> np.ndarray:
    """Encode a heatmap as a (4, canvas, canvas) float32 canvas.

    Channel 0: values scaled so the peak is 1, placed top-left.
    Channel 1: mask of real, valid cells.
    Channels 2 and 3: x and y cell-center coordinates over the full canvas.
    """
    hp, wp = heat.grid
    if hp > canvas or wp > canvas:
        raise ValueError(f"heatmap {heat.grid} exceeds canvas {canvas}")
    peak = heat.values.max()
    if peak <= 0.0:
        raise ValueError("all-zero heatmap")
    out = np.zeros((4, canvas, canvas), dtype=np.float32)
    out[0, :hp, :wp] = heat.values / peak
    out[1, :hp, :wp] = heat.valid_mask
    out[2] = (np.arange(canvas) + 0.5)[None, :] / canvas
    out[3] = (np.arange(canvas) + 0.5)[:, None] / canvas
    return out


# -- parameters ---------------------------------------------------------------


def _xavier(rng, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(seed: int = 0, dtype=np.float32) -> dict[str, ad.Tensor]:
    """Named parameter tensors; insertion order is the checkpoint order."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    p: dict[str, np.ndarray] = {}

    c_in = 4
    for i, c_out in enumerate(STEM_CHANNELS, start=1):
        fan_in, fan_out = c_in * 9, c_out * 9
        p[f"stem.conv{i}.w"] = _xavier(rng, fan_in, fan_out, (c_out, c_in, 3, 3), dtype)
        p[f"stem.conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        p[f"stem.gn{i}.w"] = np.ones(c_out, dtype=dtype)
        p[f"stem.gn{i}.b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out

    p["posemb"] = (0.02 * rng.standard_normal((N_TOKENS, WIDTH))).astype(dtype)

    def linear(name, n_in, n_out):
        p[f"{name}.w"] = _xavier(rng, n_in, n_out, (n_in, n_out), dtype)
        p[f"{name}.b"] = np.zeros(n_out, dtype=dtype)

    def ln(name):
        p[f"{name}.w"] = np.ones(WIDTH, dtype=dtype)
        p[f"{name}.b"] = np.zeros(WIDTH, dtype=dtype)

    def attn_block(prefix):
        for part in ("q", "k", "v", "o"):
            linear(f"{prefix}.w{part}", WIDTH, WIDTH)

    for i in range(N_ENC_LAYERS):
        ln(f"enc{i}.ln1")
        attn_block(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        linear(f"enc{i}.ff.fc1", WIDTH, FF_WIDTH)
        linear(f"enc{i}.ff.fc2", FF_WIDTH, WIDTH)

    p["query"] = (0.02 * rng.standard_normal((1, WIDTH))).astype(dtype)

    for i in range(N_DEC_LAYERS):
        ln(f"dec{i}.lnq")
        attn_block(f"dec{i}.attn")
        ln(f"dec{i}.ln2")
        linear(f"dec{i}.ff.fc1", WIDTH, FF_WIDTH)
        linear(f"dec{i}.ff.fc2", FF_WIDTH, WIDTH)

    ln("final_ln")
    linear("head.fc1", WIDTH, WIDTH)
    linear("head.fc2", WIDTH, 4)

    return {name: ad.Tensor(arr, requires_grad=True, name=name)
            for name, arr in p.items()}


def param_count(params: dict[str, ad.Tensor]) -> int:
    return sum(t.size for t in params.values())


# -- forward ------------------------------------------------------------------


def _linear(params, name, x: ad.Tensor) -> ad.Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _split_heads(x: ad.Tensor) -> ad.Tensor:
    n, t, _ = x.shape
    return x.reshape(n, t, N_HEADS, WIDTH // N_HEADS).transpose((0, 2, 1, 3))


def _merge_heads(x: ad.Tensor) -> ad.Tensor:
    n, _, t, _ = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(n, t, WIDTH)


def _mha(params, prefix, query: ad.Tensor, kv: ad.Tensor) -> ad.Tensor:
    q = _split_heads(_linear(params, f"{prefix}.wq", query))
    k = _split_heads(_linear(params, f"{prefix}.wk", kv))
    v = _split_heads(_linear(params, f"{prefix}.wv", kv))
    out = _merge_heads(ad.scaled_dot_attention(q, k, v))
    return _linear(params, f"{prefix}.wo", out)


def _ffn(params, prefix, x: ad.Tensor) -> ad.Tensor:
    return _linear(params, f"{prefix}.fc2", ad.silu(_linear(params, f"{prefix}.fc1", x)))


def _layer_norm(params, name, x: ad.Tensor) -> ad.Tensor:
    return ad.layer_norm(x, params[f"{name}.w"], params[f"{name}.b"])


def forward(params: dict[str, ad.Tensor], inputs: np.ndarray) -> ad.Tensor:
    """Batch of canvases (N, 4, 32, 32) to center-size boxes (N, 4) in (0, 1).

    A non-finite result raises FloatingPointError naming the first bad stage.
    """
    if inputs.ndim != 4 or inputs.shape[1] != 4:
        raise ValueError(f"expected (N, 4, {CANVAS}, {CANVAS}) input, got {inputs.shape}")
    n = inputs.shape[0]
    x = ad.Tensor(inputs)
    stages: list[tuple[str, ad.Tensor]] = []

    for i in range(1, len(STEM_CHANNELS) + 1):
        x = ad.conv2d(x, params[f"stem.conv{i}.w"], params[f"stem.conv{i}.b"],
                      stride=2, padding=1)
        x = ad.group_norm(x, params[f"stem.gn{i}.w"], params[f"stem.gn{i}.b"], GN_GROUPS)
        x = ad.silu(x)
        stages.append((f"stem.conv{i}", x))

    tokens = x.reshape(n, WIDTH, N_TOKENS).transpose((0, 2, 1))  # (N, 16, 256)
    tokens = tokens + params["posemb"]

    for i in range(N_ENC_LAYERS):
        normed = _layer_norm(params, f"enc{i}.ln1", tokens)
        tokens = tokens + _mha(params, f"enc{i}.attn", normed, normed)
        tokens = tokens + _ffn(params, f"enc{i}.ff",
                               _layer_norm(params, f"enc{i}.ln2", tokens))
        stages.append((f"enc{i}", tokens))

    query = ad.broadcast_to(params["query"].reshape(1, 1, WIDTH), (n, 1, WIDTH))
    for i in range(N_DEC_LAYERS):
        normed_q = _layer_norm(params, f"dec{i}.lnq", query)
        query = query + _mha(params, f"dec{i}.attn", normed_q, tokens)
        query = query + _ffn(params, f"dec{i}.ff",
                             _layer_norm(params, f"dec{i}.ln2", query))
        stages.append((f"dec{i}", query))

    feat = _layer_norm(params, "final_ln", query).reshape(n, WIDTH)
    hidden = ad.silu(_linear(params, "head.fc1", feat))
    out = ad.sigmoid(_linear(params, "head.fc2", hidden))  # (N, 4) center-size
    if not np.isfinite(out.data).all():
        for name, t in stages:
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"non-finite activation after {name}")
        raise FloatingPointError("non-finite activation after head")
    return out


def cs_to_corners_t(cs: ad.Tensor) -> ad.Tensor:
    """(N, 4) center-size tensor to (N, 4) corners, differentiably."""
    n = cs.shape[0]
    cx = ad.narrow(cs, 1, 0, 1)
    cy = ad.narrow(cs, 1, 1, 1)
    w = ad.narrow(cs, 1, 2, 1)
    h = ad.narrow(cs, 1, 3, 1)
    half = ad.Tensor(np.asarray(0.5, dtype=cs.dtype))
    return ad.concat([cx - w * half, cy - h * half, cx + w * half, cy + h * half], axis=1)


def predict_box(params: dict[str, ad.Tensor], heat: HeatMap) -> tuple[bx.BoxCS, bx.BoxNorm]:
    """Single-heatmap convenience wrapper returning both box forms."""
    cs = forward(params, build_input(heat)[None]).data[0]
    box_cs = bx.BoxCS(*map(float, cs))
    return box_cs, bx.cs_to_corners(box_cs)


def predict_corners(params: dict[str, ad.Tensor], heats: list[HeatMap],
                    chunk: int = 64) -> np.ndarray:
    """Predicted corner boxes (N, 4) for a list of heatmaps."""
    out = []
    for start in range(0, len(heats), chunk):
        batch = np.stack([build_input(h) for h in heats[start:start + chunk]])
        out.append(cs_to_corners_t(forward(params, batch)).data)
    return np.concatenate(out, axis=0)


# -- optimizer and training ----------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], hyper: DetectorHyper):
        self.params = params
        self.hyper = hyper
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        h = self.hyper
        self.step_count += 1
        t = self.step_count
        lr = h.lr_at(t)
        bias1 = 1.0 - h.beta1 ** t
        bias2 = 1.0 - h.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = h.beta1 * self.m[k] + (1.0 - h.beta1) * g
            self.v[k] = h.beta2 * self.v[k] + (1.0 - h.beta2) * (g * g)
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + h.eps)).astype(p.data.dtype)
            p.grad = None


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly.

    ``running_losses`` holds the mean of the most recent logged steps.
    ``ntp_surrogate`` is a reserved slot for a next-token term; it stays 0
    here so total-objective logs keep the same shape as the condensation
    objective.
    """
    params: dict[str, ad.Tensor]
    hyper: DetectorHyper
    step: int
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng_state: dict
    running_losses: dict[str, float] = field(default_factory=dict)
    ntp_surrogate: float = 0.0

    def clone(self) -> "TrainState":
        return TrainState(
            params={k: ad.Tensor(t.data.copy(), requires_grad=True, name=k)
                    for k, t in self.params.items()},
            hyper=replace(self.hyper),
            step=self.step,
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            rng_state=self.rng_state,
            running_losses=dict(self.running_losses),
            ntp_surrogate=self.ntp_surrogate,
        )


@dataclass
class LogRow:
    step: int
    l1: float
    giou_term: float
    total: float


def train(samples, hyper: DetectorHyper, seed: int = 0,
          state: TrainState | None = None,
          on_checkpoint=None) -> tuple[TrainState, list[LogRow]]:
    """Adam on detection loss over (heatmap, box) samples.

    ``samples`` is a sequence with ``.heatmap`` and ``.box``. A fresh run
    initializes parameters from ``seed``; passing ``state`` resumes exactly
    where a previous run stopped (the batch RNG state travels with it).
    Raises TrainingDiverged on a non-finite loss.
    """
    if not samples:
        raise ValueError("no training samples")
    canvases = np.stack([build_input(s.heatmap) for s in samples])
    gts = np.asarray([s.box.as_tuple() for s in samples], dtype=np.float32)

    if state is None:
        params = init_params(seed)
        opt = Adam(params, hyper)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        start_step = 0
    else:
        params = state.params
        opt = Adam(params, hyper)
        opt.m, opt.v, opt.step_count = state.adam_m, state.adam_v, state.step
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        start_step = state.step

    log: list[LogRow] = []
    last_good: TrainState | None = None

    def snapshot() -> TrainState:
        recent = log[-100:]
        running = {}
        if recent:
            running = {"l1": float(np.mean([r.l1 for r in recent])),
                       "giou": float(np.mean([r.giou_term for r in recent])),
                       "total": float(np.mean([r.total for r in recent]))}
        return TrainState(params=params, hyper=hyper, step=opt.step_count,
                          adam_m=opt.m, adam_v=opt.v,
                          rng_state=rng.bit_generator.state,
                          running_losses=running).clone()

    for step in range(start_step, hyper.steps):
        idx = rng.integers(0, len(samples), size=min(hyper.batch_size, len(samples)))
        try:
            pred_cs = forward(params, canvases[idx])
        except FloatingPointError as exc:
            raise TrainingDiverged(step + 1, last_good) from exc
        corners = cs_to_corners_t(pred_cs)
        l1_t, giou_t_term = bx.detection_loss_terms_t(corners, gts[idx])
        loss = l1_t + giou_t_term
        row = LogRow(step=step + 1, l1=float(l1_t.data),
                     giou_term=float(giou_t_term.data), total=float(loss.data))
        if not math.isfinite(row.total):
            raise TrainingDiverged(step + 1, last_good)
        loss.backward()
        opt.step()
        log.append(row)
        if hyper.checkpoint_every and (step + 1) % hyper.checkpoint_every == 0:
            last_good = snapshot()
            if on_checkpoint is not None:
                on_checkpoint(last_good)

    return snapshot(), log


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    n: int
    mean_iou: float
    median_iou: float
    mean_giou: float
    grounding_error_rate: float
    tau: float
    per_sample: list[dict] = field(default_factory=list)


def evaluate(params: dict[str, ad.Tensor], samples,
             tau: float = bx.DEFAULT_TAU) -> EvalReport:
    if not samples:
        raise ValueError("empty evaluation set")
    preds = predict_corners(params, [s.heatmap for s in samples])
    rows, ious, gious, errors = [], [], [], 0
    for s, p in zip(samples, preds):
        pred_box = bx.BoxNorm(*map(float, p))
        i = bx.iou(pred_box, s.box)
        g = bx.giou(pred_box, s.box)
        is_err = bx.classify_grounding_error(pred_box, s.box, tau)
        errors += is_err
        ious.append(i)
        gious.append(g)
        rows.append({"id": s.sample_id, "iou": i, "giou": g,
                     "grounding_error": bool(is_err),
                     "pred": [round(v, 6) for v in pred_box.as_tuple()],
                     "gt": list(s.box.as_tuple())})
    return EvalReport(n=len(rows),
                      mean_iou=float(np.mean(ious)),
                      median_iou=float(np.median(ious)),
                      mean_giou=float(np.mean(gious)),
                      grounding_error_rate=errors / len(rows),
                      tau=tau, per_sample=rows)


# -- gradient check ---------------------------------------------------------------


def gradcheck_detector(seed: int = 0, sample_count: int = 200,
                       head_only: bool = False) -> ad.GradCheckReport:
    """Finite-difference check of the full model in float64 on one sample."""
    from . import synth

    cfg = synth.SynthConfig(noise_level=0.0, distractor_count=0)
    sample = synth.gen_sample(seed, 0, cfg)
    x = build_input(sample.heatmap)[None].astype(np.float64)
    gt = np.asarray([sample.box.as_tuple()], dtype=np.float64)

    params = init_params(seed, dtype=np.float64)
    if head_only:
        checked = {k: v for k, v in params.items() if k.startswith("head.")}
    else:
        checked = params

    def loss():
        return bx.detection_loss_t(cs_to_corners_t(forward(params, x)), gt)

    return ad.grad_check(loss, checked, sample_count=sample_count,
                         step=1e-5, tolerance=1e-4, seed=seed)


def param_groups(params: dict[str, ad.Tensor]) -> dict[str, dict[str, ad.Tensor]]:
    """Parameters bucketed by the leading name component (stem, enc0, head, ...)."""
    groups: dict[str, dict[str, ad.Tensor]] = {}
    for name, t in params.items():
        groups.setdefault(name.split(".")[0], {})[name] = t
    return groups


def gradcheck_detector_grouped(seed: int = 0,
                               coords_per_group: int = 200) -> ad.GradCheckReport:
    """Full-model finite-difference check in float64, spending a budget of
    sampled coordinates on each parameter group rather than on each tensor."""
    from . import synth

    cfg = synth.SynthConfig(noise_level=0.0, distractor_count=0)
    sample = synth.gen_sample(seed, 0, cfg)
    x = build_input(sample.heatmap)[None].astype(np.float64)
    gt = np.asarray([sample.box.as_tuple()], dtype=np.float64)
    params = init_params(seed, dtype=np.float64)

    def loss():
        return bx.detection_loss_t(cs_to_corners_t(forward(params, x)), gt)

    merged: ad.GradCheckReport | None = None
    for _, group in sorted(param_groups(params).items()):
        per_tensor = max(1, coords_per_group // len(group))
        rep = ad.grad_check(loss, group, sample_count=per_tensor,
                            step=1e-5, tolerance=1e-4, seed=seed)
        if merged is None:
            merged = rep
        else:
            merged = ad.GradCheckReport(
                passed=merged.passed and rep.passed,
                max_rel_err=max(merged.max_rel_err, rep.max_rel_err),
                worst=(rep.worst if rep.max_rel_err > merged.max_rel_err
                       else merged.worst),
                checked=merged.checked + rep.checked,
                skipped=merged.skipped + rep.skipped,
                tolerance=merged.tolerance,
                per_param={**merged.per_param, **rep.per_param})
    return merged
