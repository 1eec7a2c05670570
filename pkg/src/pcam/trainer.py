"""SGD training loop: pairing, triple forward, rollout, refinement, losses.

Each epoch refreshes target pseudo-labels from the current model, rebuilds
and filters pairs, then runs mini-batches of paired steps.  A step runs the
three-branch forward, accumulates the cross rollout, optionally crops and
resamples the layer-L patch grids around the attention box (active only
after the configured epoch), evaluates the four-term objective, and
backpropagates by hand through every differentiable path.  Inference is a
plain single-branch forward and never touches pairing or refinement.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import pairing, refinement
from .numerics import ContractViolation, format_float, rng_from_seed, substream
from .objective import (distill_loss, distill_loss_grads, one_hot, softmax_vec,
                        source_cls_loss, source_cls_loss_grad, target_pseudo_loss,
                        target_pseudo_loss_grad, total_loss)
from .pf_loss import pf_loss, pf_loss_grad
from .rollout import rollout_backward, rollout_stack
from .synth import ImageSample
from .vit import (ModelConfig, block_backward, block_forward, classify,
                  forward_single, forward_triple, backward_triple, head_backward,
                  head_features, head_features_backward, init_params, logits_of)


@dataclass
class TrainConfig:
    epochs: int = 12
    warmup_epochs: int = 3
    batch_size: int = 16
    lr: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta: float = 0.05
    theta: float = 0.5
    tau: float = 2.0
    w_cls_s: float = 1.0
    w_dst: float = 1.0
    w_cls_t: float = 1.0
    w_pf: float = 1.0
    seed: int = 0
    fr_enabled: bool = True
    fr_start_epoch: int = 0          # 0 = first epoch after warmup
    box_layer: int = 0               # 0 = last layer drives the crop
    sign_mode: str = "pulling"
    center_form: str = "normalized"
    com_grad: bool = True
    stop_teacher: bool = True
    distill_mode: str = "as_written"
    refine_source: bool = True
    dual_filter: bool = True
    gamma: float = 1.0               # retained pseudo-label accuracy after noise

    def __post_init__(self):
        if self.fr_start_epoch == 0:
            self.fr_start_epoch = self.warmup_epochs + 1
        if self.warmup_epochs > self.epochs:
            raise ContractViolation("warmup cannot exceed the epoch count")
        if self.fr_enabled and self.fr_start_epoch <= self.warmup_epochs:
            raise ContractViolation("refinement must not activate during warmup")
        for v in (self.lr, self.momentum + 1e-12, self.tau):
            if v <= 0:
                raise ContractViolation("rates must be positive")

    @property
    def weights(self):
        return (self.w_cls_s, self.w_dst, self.w_cls_t, self.w_pf)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    rejected_steps: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(velocity={k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> bool:
    """Heavy-ball update with decoupled-into-gradient weight decay.

    Returns False (and leaves everything untouched) when any gradient entry
    is non-finite; the caller counts the rejection.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.rejected_steps += 1
            return False
    for k in params:
        g = grads[k] + weight_decay * params[k]
        state.velocity[k] = momentum * state.velocity[k] + g
        params[k] -= lr * state.velocity[k]
    return True


# ---------------------------------------------------------------------------
# Evaluation (inference path)


def infer(params: dict, cfg: ModelConfig, image: np.ndarray) -> int:
    f, _, _ = forward_single(params, cfg, image)
    return int(np.argmax(logits_of(f, params)))


def evaluate(params: dict, cfg: ModelConfig, samples: list[ImageSample]):
    """Features, classifier distributions, and predictions for a sample list."""
    feats = np.zeros((len(samples), cfg.embed_dim))
    probs = np.zeros((len(samples), cfg.n_classes))
    preds = np.zeros(len(samples), dtype=int)
    for i, s in enumerate(samples):
        f, _, _ = forward_single(params, cfg, s.pixels)
        logits = logits_of(f, params)
        feats[i] = f
        probs[i] = softmax_vec(logits)
        preds[i] = int(np.argmax(logits))
    return feats, probs, preds


def accuracy(preds: np.ndarray, samples: list[ImageSample]) -> float:
    truth = np.array([s.label for s in samples])
    return float(np.mean(preds == truth))


def per_class_accuracy(preds: np.ndarray, samples: list[ImageSample], n_classes: int) -> np.ndarray:
    truth = np.array([s.label for s in samples])
    out = np.zeros(n_classes)
    for k in range(n_classes):
        sel = truth == k
        out[k] = float(np.mean(preds[sel] == k)) if sel.any() else np.nan
    return out


# ---------------------------------------------------------------------------
# One paired training step


def _unit_layer_grids(maps, grid_side):
    """Per-layer per-patch maps scaled to unit total mass (divide by l * N)."""
    n = grid_side * grid_side
    return [m.per_patch.reshape(grid_side, grid_side) / (m.layer * n) for m in maps]


def _refined_cls_feature(params, cfg, fwd, branch, box):
    """Re-entry forward: crop the pre-final-block patch tokens to the box,
    resample to full grid, rebuild the token sequence with the branch's own
    CLS row, and run the final block again.  Returns the refined CLS feature
    plus what the backward needs."""
    g, d, L = cfg.grid_side, cfg.embed_dim, cfg.n_layers
    state_in = fwd.stack.states[branch][L - 1]
    patch_grid = state_in[1:].reshape(g, g, d)
    refined = refinement.box_interpolate(patch_grid, box)
    tokens = np.vstack([state_in[0][None, :], refined.reshape(cfg.n_patches, d)])
    z_out, cache = block_forward(tokens, tokens, params, cfg, L - 1)
    return z_out[0], cache


def _refined_backward(d_feat, cache, box, params, cfg, grads):
    """Adjoint of _refined_cls_feature: returns the (T, D) adjoint to add on
    the branch's layer L-1 state."""
    g, d = cfg.grid_side, cfg.embed_dim
    d_out = np.zeros((cfg.n_tokens, d))
    d_out[0] = d_feat
    d_tokens, _ = block_backward(d_out, cache, params, cfg, grads)
    d_state = np.zeros((cfg.n_tokens, d))
    d_state[0] = d_tokens[0]
    d_refined = d_tokens[1:].reshape(g, g, d)
    d_state[1:] = refinement.box_interpolate_backward(d_refined, box, (g, g, d)).reshape(cfg.n_patches, d)
    return d_state


def pair_step(params: dict, cfg: ModelConfig, tcfg: TrainConfig,
              x_s: ImageSample, x_t: ImageSample, pseudo_label: int,
              active: np.ndarray, fr_active: bool,
              loss_gate: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)):
    """Forward, losses, and parameter gradients for one source/target pair.

    loss_gate multiplies the four loss weights (the warmup schedule turns
    target-side terms off while the source model is still forming).
    """
    g = cfg.grid_side
    n, d = cfg.n_patches, cfg.embed_dim
    L = cfg.n_layers
    w = tuple(wi * gi for wi, gi in zip(tcfg.weights, loss_gate))
    fwd = forward_triple(params, cfg, x_s.pixels, x_t.pixels)
    ps = [fwd.stack.patch_states("ss", l) for l in range(1, L + 1)]
    pt = [fwd.stack.patch_states("tt", l) for l in range(1, L + 1)]
    maps = rollout_stack(ps, pt, branch="st")
    layer_grids = _unit_layer_grids(maps, g)

    box = None
    omega = 1.0
    if fr_active:
        box_l = tcfg.box_layer if tcfg.box_layer > 0 else L
        box = refinement.box_identify(layer_grids[box_l - 1], tcfg.beta)
        omega = refinement.foreground_rate([box], cfg.patch_side, cfg.image_side)

    f_s, f_t, f_st = fwd.features.f_s, fwd.features.f_t, fwd.features.f_st
    refine_s = fr_active and tcfg.refine_source
    refine_t = fr_active
    cache_fr_s = cache_fr_t = None
    if refine_s:
        feat_s, cache_fr_s = _refined_cls_feature(params, cfg, fwd, "ss", box)
    else:
        feat_s = f_s
    if refine_t:
        feat_t, cache_fr_t = _refined_cls_feature(params, cfg, fwd, "tt", box)
    else:
        feat_t = f_t

    hf_s, ln_s = head_features(feat_s, params)
    hf_t, ln_t = head_features(feat_t, params)
    hf_stu, ln_stu = head_features(f_t, params)
    hf_tea, ln_tea = head_features(f_st, params)
    logits_s = classify(hf_s, params)
    logits_t = classify(hf_t, params)
    logits_stu = classify(hf_stu, params)
    logits_tea = classify(hf_tea, params)
    y_s = one_hot(x_s.label, cfg.n_classes)

    l_cls_s = source_cls_loss(logits_s, y_s)
    l_dst = distill_loss(logits_stu, logits_tea, tcfg.tau, tcfg.distill_mode)
    l_cls_t = target_pseudo_loss(logits_t, pseudo_label, active)
    l_pf = pf_loss(layer_grids, tcfg.sign_mode, tcfg.center_form)
    breakdown = total_loss([l_cls_s, l_dst, l_cls_t, l_pf], w, tcfg.tau)

    # ---- backward ----
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    def head_chain(hf, ln_cache, d_logits):
        d_hf = head_backward(hf, d_logits, params, grads)
        return head_features_backward(d_hf, ln_cache, params, grads)

    d_feat_s = head_chain(hf_s, ln_s, w[0] * source_cls_loss_grad(logits_s, y_s))
    d_feat_t = head_chain(hf_t, ln_t, w[2] * target_pseudo_loss_grad(logits_t, pseudo_label))
    d_stu, d_tea = distill_loss_grads(logits_stu, logits_tea, tcfg.tau, tcfg.distill_mode)
    d_f_t_stu = head_chain(hf_stu, ln_stu, w[1] * d_stu)
    d_f_st = None
    if not tcfg.stop_teacher:
        d_f_st = head_chain(hf_tea, ln_tea, w[1] * d_tea)

    pairwise_adjoints = None
    if w[3] != 0.0:
        d_grids = pf_loss_grad(layer_grids, tcfg.sign_mode, tcfg.center_form, tcfg.com_grad)
        pairwise_adjoints = []
        for l, dgrid in enumerate(d_grids, start=1):
            per_patch_adj = w[3] * dgrid.ravel() / (l * n)
            pairwise_adjoints.append(np.tile(per_patch_adj, (n, 1)))
    if pairwise_adjoints is not None:
        d_ps, d_pt = rollout_backward(ps, pt, pairwise_adjoints)
    else:
        d_ps = [np.zeros((n, d)) for _ in range(L)]
        d_pt = [np.zeros((n, d)) for _ in range(L)]

    adjoints = {b: [None] * (L + 1) for b in ("ss", "tt", "st")}
    t_tokens = cfg.n_tokens
    for l in range(1, L + 1):
        a_s = np.zeros((t_tokens, d))
        a_s[1:] = d_ps[l - 1]
        a_t = np.zeros((t_tokens, d))
        a_t[1:] = d_pt[l - 1]
        adjoints["ss"][l] = a_s
        adjoints["tt"][l] = a_t
    if refine_s:
        adjoints["ss"][L - 1] += _refined_backward(d_feat_s, cache_fr_s, box, params, cfg, grads)
    else:
        adjoints["ss"][L][0] += d_feat_s
    if refine_t:
        adjoints["tt"][L - 1] += _refined_backward(d_feat_t, cache_fr_t, box, params, cfg, grads)
    else:
        adjoints["tt"][L][0] += d_feat_t
    adjoints["tt"][L][0] += d_f_t_stu
    if d_f_st is not None:
        a_st = np.zeros((t_tokens, d))
        a_st[0] = d_f_st
        adjoints["st"][L] = a_st

    for k, v in backward_triple(fwd, params, adjoints).items():
        grads[k] += v
    return grads, breakdown, omega, box


# ---------------------------------------------------------------------------
# Epoch and run drivers


@dataclass
class EpochMetrics:
    epoch: int
    acc: float
    omega: float
    kept: int
    loss_mean: float
    purity_kept: float = float("nan")
    purity_all: float = float("nan")
    filter_fallback: bool = False
    fallback_boxes: int = 0


@dataclass
class TrainResult:
    params: dict
    epochs: list[EpochMetrics]
    final_acc: float
    final_per_class: np.ndarray
    step_lines: list[str] = field(default_factory=list)
    loss_lines: list[str] = field(default_factory=list)
    rejected_steps: int = 0


def _epoch_lr(tcfg: TrainConfig, epoch: int) -> float:
    if tcfg.warmup_epochs > 0 and epoch <= tcfg.warmup_epochs:
        return tcfg.lr * epoch / tcfg.warmup_epochs
    return tcfg.lr


def train_epoch(params: dict, state: OptimizerState, cfg: ModelConfig, tcfg: TrainConfig,
                source: list[ImageSample], target: list[ImageSample],
                epoch: int, step_offset: int,
                step_lines: list[str], loss_lines: list[str]) -> EpochMetrics:
    """One full pass: pseudo-label refresh, pair build/filter, paired SGD steps."""
    feats_t, probs_t, preds_t = evaluate(params, cfg, target)
    feats_s, _, _ = evaluate(params, cfg, source)
    acc = accuracy(preds_t, target)

    warmup = epoch <= tcfg.warmup_epochs
    loss_gate = (1.0, 0.0, 0.0, 0.0) if warmup else (1.0, 1.0, 1.0, 1.0)

    tbank = pairing.FeatureBank(feats_t, "target", probs=probs_t)
    sbank = pairing.FeatureBank(feats_s, "source")
    _, pseudo, active = pairing.init_centers(tbank, cfg.n_classes)
    if tcfg.gamma < 1.0:
        pseudo = pairing.inject_label_noise(pseudo, tcfg.gamma,
                                            substream(tcfg.seed, 1, epoch), cfg.n_classes)
    src_labels = np.array([s.label for s in source])
    pairs = pairing.build_pairs(sbank, tbank)
    pairs = pairing.filter_pairs(pairs, pseudo, src_labels, tcfg.theta,
                                 require_similarity=tcfg.dual_filter)
    # pair filtering needs a formed source model: during warmup train on all pairs
    kept = pairs if warmup else pairing.kept_pairs(pairs)
    filter_fallback = False
    if not kept:
        kept = pairs  # never abort an epoch: train unfiltered and flag it
        filter_fallback = True
    true_t = np.array([s.label for s in target])
    purity_kept = pairing.pair_purity(kept, true_t, src_labels)
    purity_all = pairing.pair_purity(pairs, true_t, src_labels)

    fr_active = tcfg.fr_enabled and epoch >= tcfg.fr_start_epoch
    order = substream(tcfg.seed, 2, epoch).permutation(len(kept))
    lr = _epoch_lr(tcfg, epoch)
    losses, omegas = [], []
    fallback_boxes = 0
    step = step_offset
    for start in range(0, len(order), tcfg.batch_size):
        batch = order[start:start + tcfg.batch_size]
        grads_sum = {k: np.zeros_like(v) for k, v in params.items()}
        batch_losses, batch_omegas = [], []
        for idx in batch:
            p = kept[int(idx)]
            grads, breakdown, omega, box = pair_step(
                params, cfg, tcfg, source[p.src], target[p.tgt],
                int(pseudo[p.tgt]), active, fr_active, loss_gate)
            for k in grads_sum:
                grads_sum[k] += grads[k] / len(batch)
            batch_losses.append(breakdown)
            batch_omegas.append(omega)
            if box is not None and box.fallback:
                fallback_boxes += 1
        sgd_step(params, grads_sum, state, lr, tcfg.momentum, tcfg.weight_decay)
        step += 1
        mean_total = float(np.mean([b.total for b in batch_losses]))
        mean_omega = float(np.mean(batch_omegas))
        losses.extend(batch_losses)
        omegas.extend(batch_omegas)
        step_lines.append(f"{epoch} {step} {format_float(mean_total)} "
                          f"{format_float(acc)} {format_float(mean_omega)} {len(kept)}")
        mean_parts = [float(np.mean([getattr(b, f) for b in batch_losses]))
                      for f in ("cls_s", "dst", "cls_t", "pf", "total")]
        loss_lines.append(f"{step} " + " ".join(format_float(v) for v in mean_parts))

    return EpochMetrics(epoch=epoch, acc=acc, omega=float(np.mean(omegas)),
                        kept=len(kept), loss_mean=float(np.mean([b.total for b in losses])),
                        purity_kept=purity_kept, purity_all=purity_all,
                        filter_fallback=filter_fallback, fallback_boxes=fallback_boxes)


def train(cfg: ModelConfig, tcfg: TrainConfig, source: list[ImageSample],
          target: list[ImageSample], out_dir: str | None = None,
          params: dict | None = None) -> TrainResult:
    """Full run; writes metrics/losses/epochs files when out_dir is given."""
    if params is None:
        params = init_params(cfg, rng_from_seed(tcfg.seed))
    state = OptimizerState.zeros_like(params)
    step_lines: list[str] = []
    loss_lines: list[str] = []
    epochs: list[EpochMetrics] = []
    step_offset = 0
    for epoch in range(1, tcfg.epochs + 1):
        em = train_epoch(params, state, cfg, tcfg, source, target, epoch,
                         step_offset, step_lines, loss_lines)
        step_offset = len(loss_lines)
        epochs.append(em)
    _, _, preds = evaluate(params, cfg, target)
    result = TrainResult(params=params, epochs=epochs,
                         final_acc=accuracy(preds, target),
                         final_per_class=per_class_accuracy(preds, target, cfg.n_classes),
                         step_lines=step_lines, loss_lines=loss_lines,
                         rejected_steps=state.rejected_steps)
    if out_dir is not None:
        write_metrics(out_dir, result)
    return result


def write_metrics(out_dir: str, result: TrainResult) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="ascii") as fh:
        fh.write("epoch step loss_total acc omega kept_pairs\n")
        fh.writelines(line + "\n" for line in result.step_lines)
    with open(os.path.join(out_dir, "losses.txt"), "w", encoding="ascii") as fh:
        fh.write("step l_cls_s l_dst l_cls_t l_pf total\n")
        fh.writelines(line + "\n" for line in result.loss_lines)
    with open(os.path.join(out_dir, "epochs.txt"), "w", encoding="ascii") as fh:
        fh.write("epoch acc omega kept_pairs loss_mean purity_kept purity_all\n")
        for em in result.epochs:
            fh.write(f"{em.epoch} {format_float(em.acc)} {format_float(em.omega)} "
                     f"{em.kept} {format_float(em.loss_mean)} "
                     f"{format_float(em.purity_kept)} {format_float(em.purity_all)}\n")
    with open(os.path.join(out_dir, "final.txt"), "w", encoding="ascii") as fh:
        fh.write("final_acc " + format_float(result.final_acc) + "\n")
        fh.write("per_class_acc " + " ".join(format_float(v) for v in result.final_per_class) + "\n")
        fh.write(f"rejected_steps {result.rejected_steps}\n")
