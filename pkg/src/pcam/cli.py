"""Single executable: dataset generation, training, evaluation, rollout
export, the three ablation protocols, and figure rendering.

Every command resolves one flat config (file < --set overrides < --seed),
writes the resolved snapshot next to its outputs, and emits machine-readable
whitespace tables.  Exit codes: 0 ok, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import protocols
from .config import ConfigError, load_config, write_snapshot
from .numerics import ContractViolation, format_float, save_matrix
from .rollout import rollout_stack
from .synth import load_dataset, mismatch_report, save_dataset
from .trainer import accuracy, evaluate, per_class_accuracy
from .vit import forward_triple, init_params, load_checkpoint, save_checkpoint
from .numerics import rng_from_seed


def _add_common(sub):
    sub.add_argument("--config", default=None, help="flat key=value config file")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="seed override")
    sub.add_argument("--set", dest="sets", action="append", default=[],
                     metavar="KEY=VALUE", help="config override (repeatable)")


def _prepare(args):
    cfg = load_config(args.config, args.sets, args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_snapshot(os.path.join(args.out, "config_snapshot.txt"), cfg.values)
    return cfg


def _load_or_make_data(values):
    if values["data.source_dir"] and values["data.target_dir"]:
        return load_dataset(values["data.source_dir"]), load_dataset(values["data.target_dir"])
    return protocols.make_data(values, values["seed"])


def cmd_generate(args) -> int:
    cfg = _prepare(args)
    source, target = protocols.make_data(cfg.values, cfg["seed"])
    save_dataset(os.path.join(args.out, "source"), source)
    save_dataset(os.path.join(args.out, "target"), target)
    return 0


def cmd_train(args) -> int:
    cfg = _prepare(args)
    source, target = _load_or_make_data(cfg.values)
    result, _, _ = protocols.run_training(cfg.values, cfg["seed"], out_dir=args.out,
                                          source=source, target=target)
    save_checkpoint(os.path.join(args.out, "checkpoint"), result.params)
    return 0


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    if not cfg["eval.checkpoint"]:
        raise ConfigError("eval requires --set eval.checkpoint=<dir>")
    params = load_checkpoint(cfg["eval.checkpoint"])
    mcfg = protocols.model_config(cfg.values)
    source, target = _load_or_make_data(cfg.values)
    _, _, preds = evaluate(params, mcfg, target)
    per_class = per_class_accuracy(preds, target, mcfg.n_classes)
    report = mismatch_report(source, target, mcfg.n_classes, per_class_acc=per_class)
    with open(os.path.join(args.out, "eval.txt"), "w", encoding="ascii") as fh:
        fh.write("final_acc " + format_float(accuracy(preds, target)) + "\n")
        fh.write("per_class_acc " + " ".join(format_float(v) for v in per_class) + "\n")
        fh.write("ratio_src " + " ".join(format_float(v) for v in report["ratio_src"]) + "\n")
        fh.write("ratio_tgt " + " ".join(format_float(v) for v in report["ratio_tgt"]) + "\n")
        fh.write("ratio_gap " + " ".join(format_float(v) for v in report["gap"]) + "\n")
        corr = report["corr"]
        fh.write("gap_acc_corr " + (format_float(corr) if corr is not None else "nan") + "\n")
    return 0


def cmd_rollout(args) -> int:
    cfg = _prepare(args)
    mcfg = protocols.model_config(cfg.values)
    if cfg["rollout.checkpoint"]:
        params = load_checkpoint(cfg["rollout.checkpoint"])
    else:
        params = init_params(mcfg, rng_from_seed(cfg["seed"]))
    source, target = _load_or_make_data(cfg.values)
    idx = cfg["rollout.sample_index"]
    if not (0 <= idx < min(len(source), len(target))):
        raise ConfigError(f"rollout.sample_index {idx} outside the dataset")
    fwd = forward_triple(params, mcfg, source[idx].pixels, target[idx].pixels)
    L = mcfg.n_layers
    ps = [fwd.stack.patch_states("ss", l) for l in range(1, L + 1)]
    pt = [fwd.stack.patch_states("tt", l) for l in range(1, L + 1)]
    for branch, (za, zb) in (("st", (ps, pt)), ("ss", (ps, ps))):
        for rmap in rollout_stack(za, zb, branch=branch):
            grid = rmap.grid(mcfg.grid_side)
            save_matrix(os.path.join(args.out, f"rollout_{branch}_l{rmap.layer}.txt"), grid)
    return 0


def cmd_sweep_beta(args) -> int:
    cfg = _prepare(args)
    records = protocols.beta_protocol(cfg.values, out_root=args.out)
    with open(os.path.join(args.out, "sweep_accuracy.txt"), "w", encoding="ascii") as fh:
        fh.write("beta acc_mean acc_std n_seeds\n")
        for r in records:
            fh.write(f"{format_float(r['beta'])} {format_float(r['acc_mean'])} "
                     f"{format_float(r['acc_std'])} {len(r['accs'])}\n")
    with open(os.path.join(args.out, "sweep_boxes.txt"), "w", encoding="ascii") as fh:
        for r in records:
            b = r["box"]
            fh.write(f"{format_float(r['beta'])} {b.col_min} {b.col_max} "
                     f"{b.row_min} {b.row_max} {format_float(r['omega'])}\n")
    return 0


def cmd_noise_robustness(args) -> int:
    cfg = _prepare(args)
    records = protocols.noise_protocol(cfg.values, out_root=args.out)
    with open(os.path.join(args.out, "robustness.txt"), "w", encoding="ascii") as fh:
        fh.write("gamma acc_pcam acc_baseline purity_kept_pcam purity_all_pcam\n")
        for r in records:
            fh.write(f"{format_float(r['gamma'])} {format_float(r['acc_pcam'])} "
                     f"{format_float(r['acc_baseline'])} {format_float(r['purity_kept_pcam'])} "
                     f"{format_float(r['purity_all_pcam'])}\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _prepare(args)
    records = protocols.ablate_protocol(cfg.values, out_root=args.out)
    with open(os.path.join(args.out, "ablate.txt"), "w", encoding="ascii") as fh:
        fh.write("pf_weight acc_mean acc_var\n")
        for r in records:
            fh.write(f"{format_float(r['pf_weight'])} {format_float(r['acc_mean'])} "
                     f"{format_float(r['acc_var'])}\n")
    return 0


def cmd_report(args) -> int:
    from .report import render_all
    os.makedirs(args.out, exist_ok=True)
    written = render_all(args.out)
    for path in written:
        print(path)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "sweep-beta": cmd_sweep_beta,
    "noise-robustness": cmd_noise_robustness,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcam", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        _add_common(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractViolation) as exc:
        print(f"pcam: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # noqa: BLE001 - CLI boundary
        print(f"pcam: runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
