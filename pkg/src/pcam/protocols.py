"""Experiment drivers shared by the CLI and the acceptance suite.

Every protocol builds its domains and model from the flat config, swaps in
the arm-specific training switches, and returns plain records the callers
format.  Runs are independent and seeded, so sweep fan-out is free to run
them concurrently; results are keyed, never ordered by completion.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .refinement import box_identify, foreground_rate
from .rollout import rollout_stack
from .synth import DomainSpec, generate_domain, mismatch_report
from .trainer import TrainConfig, TrainResult, evaluate, per_class_accuracy, train
from .vit import ModelConfig, forward_triple

BASELINE_OVERRIDES = dict(fr_enabled=False, w_pf=0.0, dual_filter=False)


def worker_count() -> int:
    raw = os.environ.get("PCAM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def model_config(values: dict) -> ModelConfig:
    return ModelConfig(image_side=values["model.image_side"],
                       channels=values["model.channels"],
                       patch_side=values["model.patch_side"],
                       embed_dim=values["model.embed_dim"],
                       n_heads=values["model.heads"],
                       n_layers=values["model.layers"],
                       n_classes=values["model.classes"])


def train_config(values: dict, seed: int | None = None, **overrides) -> TrainConfig:
    kw = dict(epochs=values["train.epochs"], warmup_epochs=values["train.warmup_epochs"],
              batch_size=values["train.batch_size"], lr=values["train.lr"],
              momentum=values["train.momentum"], weight_decay=values["train.weight_decay"],
              beta=values["train.beta"], theta=values["train.theta"], tau=values["train.tau"],
              w_cls_s=values["train.w_cls_s"], w_dst=values["train.w_dst"],
              w_cls_t=values["train.w_cls_t"], w_pf=values["train.w_pf"],
              seed=values["seed"] if seed is None else seed,
              fr_enabled=values["train.fr_enabled"],
              fr_start_epoch=values["train.fr_start_epoch"],
              box_layer=values["train.box_layer"], sign_mode=values["train.sign_mode"],
              center_form=values["train.center_form"], com_grad=values["train.com_grad"],
              stop_teacher=values["train.stop_teacher"],
              distill_mode=values["train.distill_mode"],
              refine_source=values["train.refine_source"],
              dual_filter=values["train.dual_filter"], gamma=values["train.gamma"])
    kw.update(overrides)
    return TrainConfig(**kw)


def domain_specs(values: dict, seed: int) -> tuple[DomainSpec, DomainSpec]:
    common = dict(n_classes=values["model.classes"], shapes=tuple(values["data.shapes"]),
                  ratio_jitter=values["data.ratio_jitter"],
                  clutter_density=values["data.clutter_density"],
                  clutter_intensity=values["data.clutter_intensity"],
                  noise_level=values["data.noise_level"],
                  n_samples=values["data.samples_per_domain"],
                  image_side=values["model.image_side"],
                  channels=values["model.channels"],
                  patch_side=values["model.patch_side"])
    src = DomainSpec(domain="source", ratio_means=tuple(values["data.src_ratios"]),
                     seed=2 * seed, **common)
    tgt = DomainSpec(domain="target", ratio_means=tuple(values["data.tgt_ratios"]),
                     seed=2 * seed + 1, **common)
    return src, tgt


def make_data(values: dict, seed: int):
    src, tgt = domain_specs(values, seed)
    return generate_domain(src), generate_domain(tgt)


def run_training(values: dict, seed: int, out_dir: str | None = None,
                 source=None, target=None, **tcfg_overrides) -> tuple[TrainResult, list, list]:
    cfg = model_config(values)
    tcfg = train_config(values, seed=seed, **tcfg_overrides)
    if source is None or target is None:
        source, target = make_data(values, seed)
    result = train(cfg, tcfg, source, target, out_dir=out_dir)
    return result, source, target


def _map_runs(tasks: dict, workers: int | None = None) -> dict:
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        return {key: fn() for key, fn in tasks.items()}
    out = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {key: pool.submit(fn) for key, fn in tasks.items()}
        for key, fut in futures.items():
            out[key] = fut.result()
    return out


# ---------------------------------------------------------------------------
# Foreground-mismatch correlation (baseline arm shows the failure mode)


def fom_protocol(values: dict, out_root: str | None = None) -> list[dict]:
    records = []
    for seed in values["protocol.seeds"]:
        out_dir = os.path.join(out_root, f"seed{seed}") if out_root else None
        result, source, target = run_training(values, seed, out_dir, **BASELINE_OVERRIDES)
        report = mismatch_report(source, target, values["model.classes"],
                                 per_class_acc=result.final_per_class)
        records.append(dict(seed=seed, acc=result.final_acc, gap=report["gap"],
                            per_class=result.final_per_class, corr=report["corr"]))
    return records


# ---------------------------------------------------------------------------
# Paired full-method vs ablated-baseline comparison


def benefit_protocol(values: dict, out_root: str | None = None,
                     seeds=None) -> list[dict]:
    seeds = values["protocol.seeds"] if seeds is None else seeds

    def one(seed):
        source, target = make_data(values, seed)
        dir_p = os.path.join(out_root, f"pcam_seed{seed}") if out_root else None
        dir_b = os.path.join(out_root, f"baseline_seed{seed}") if out_root else None
        full, _, _ = run_training(values, seed, dir_p, source=source, target=target)
        base, _, _ = run_training(values, seed, dir_b, source=source, target=target,
                                  **BASELINE_OVERRIDES)
        return dict(seed=seed, acc_pcam=full.final_acc, acc_baseline=base.final_acc,
                    omegas=[em.omega for em in full.epochs],
                    fr_start=train_config(values, seed=seed).fr_start_epoch)

    results = _map_runs({s: (lambda s=s: one(s)) for s in seeds})
    return [results[s] for s in seeds]


# ---------------------------------------------------------------------------
# Threshold sensitivity sweep


def mean_unit_grid(result: TrainResult, values: dict, source, target, n_pairs: int = 8):
    """Mean unit-mass final-layer cross grid over the first index-aligned pairs."""
    cfg = model_config(values)
    L = cfg.n_layers
    grids = []
    for i in range(min(n_pairs, len(source), len(target))):
        fwd = forward_triple(result.params, cfg, source[i].pixels, target[i].pixels)
        ps = [fwd.stack.patch_states("ss", l) for l in range(1, L + 1)]
        pt = [fwd.stack.patch_states("tt", l) for l in range(1, L + 1)]
        stack = rollout_stack(ps, pt)
        per_patch = stack[-1].per_patch
        grids.append((per_patch / per_patch.sum()).reshape(cfg.grid_side, cfg.grid_side))
    return np.mean(grids, axis=0)


def beta_protocol(values: dict, out_root: str | None = None) -> list[dict]:
    seeds = values["protocol.seeds"]
    betas = values["sweep.betas"]

    def one(beta, seed):
        out_dir = os.path.join(out_root, f"beta{beta}_seed{seed}") if out_root else None
        result, source, target = run_training(values, seed, out_dir, beta=beta)
        return result, source, target

    tasks = {(b, s): (lambda b=b, s=s: one(b, s)) for b in betas for s in seeds}
    results = _map_runs(tasks)
    records = []
    for beta in betas:
        accs = [results[(beta, s)][0].final_acc for s in seeds]
        first = results[(beta, seeds[0])]
        grid = mean_unit_grid(first[0], values, first[1], first[2])
        box = box_identify(grid, beta)
        omega = foreground_rate([box], values["model.patch_side"], values["model.image_side"])
        records.append(dict(beta=beta, accs=accs, acc_mean=float(np.mean(accs)),
                            acc_std=float(np.std(accs)), box=box, omega=omega))
    return records


# ---------------------------------------------------------------------------
# Pseudo-label noise robustness


def noise_protocol(values: dict, out_root: str | None = None) -> list[dict]:
    seeds = values["protocol.seeds"]
    gammas = values["robustness.gammas"]

    def one(arm, gamma, seed):
        overrides = dict(gamma=gamma)
        if arm == "baseline":
            overrides.update(BASELINE_OVERRIDES)
        out_dir = os.path.join(out_root, f"{arm}_gamma{gamma}_seed{seed}") if out_root else None
        result, _, _ = run_training(values, seed, out_dir, **overrides)
        last = result.epochs[-1]
        return dict(acc=result.final_acc, purity_kept=last.purity_kept,
                    purity_all=last.purity_all)

    tasks = {(arm, g, s): (lambda a=arm, g=g, s=s: one(a, g, s))
             for arm in ("pcam", "baseline") for g in gammas for s in seeds}
    results = _map_runs(tasks)
    records = []
    for gamma in gammas:
        rec = dict(gamma=gamma)
        for arm in ("pcam", "baseline"):
            rows = [results[(arm, gamma, s)] for s in seeds]
            rec[f"acc_{arm}"] = float(np.mean([r["acc"] for r in rows]))
            rec[f"purity_kept_{arm}"] = float(np.mean([r["purity_kept"] for r in rows]))
            rec[f"purity_all_{arm}"] = float(np.mean([r["purity_all"] for r in rows]))
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Concentration-loss weight ablation


def ablate_protocol(values: dict, out_root: str | None = None) -> list[dict]:
    seeds = values["protocol.seeds"]
    weights = values["ablate.pf_weights"]

    def one(w, seed):
        out_dir = os.path.join(out_root, f"w{w}_seed{seed}") if out_root else None
        result, _, _ = run_training(values, seed, out_dir, w_pf=w)
        return result.final_acc

    tasks = {(w, s): (lambda w=w, s=s: one(w, s)) for w in weights for s in seeds}
    results = _map_runs(tasks)
    records = []
    for w in weights:
        accs = np.array([results[(w, s)] for s in seeds])
        records.append(dict(pf_weight=w, acc_mean=float(accs.mean()),
                            acc_var=float(accs.var()), accs=accs.tolist()))
    return records
