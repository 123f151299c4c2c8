"""Command-line front end.

Subcommands:
    train       train one configuration and evaluate it
    eval        re-evaluate a finished run (optionally at other SNRs)
    attack      train a detector against a finished run at one SNR
    complexity  closed-form FLOP/parameter report for a configuration
    sweep       train a grid over one config key x seeds and summarize
    report      cross-run comparison table with relative improvements
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import config_from_dict, config_to_dict, load_config
from .errors import ConfigurationError
from .metrics import relative_improvement


def _add_config_args(p):
    p.add_argument("--config", default=None, help="YAML config file (supports include:)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted override, e.g. loss.lambda_cts=2")


def _cmd_train(args):
    from .harness import train_run

    cfg = load_config(args.config, args.overrides)
    record = train_run(cfg, run_root=args.output)
    print(f"run dir: {record.run_dir}")
    if record.evaluation:
        from .harness import format_eval_table
        print(format_eval_table(record.evaluation), end="")
    return 0


def _cmd_eval(args):
    from .datagen import build_bundle, dataset_splits
    from .harness import RunRecord, evaluate_system, format_eval_table, load_system, render_plots

    cfg, system, record = load_system(args.run)
    if args.snrs:
        snrs = tuple(float(s) for s in args.snrs.split(","))
        cfg = config_from_dict({**config_to_dict(cfg), "eval_snrs": list(snrs)})
    d = cfg.data
    *_, attacker_seeds = dataset_splits(d.n_train, d.n_val, d.n_test, base_seed=d.base_seed,
                                        size=cfg.encoder.image_size, n_extra=d.n_attacker)
    _, _, test_b = dataset_splits(d.n_train, d.n_val, d.n_test, base_seed=d.base_seed,
                                  size=cfg.encoder.image_size)
    attacker_b = build_bundle(attacker_seeds, size=cfg.encoder.image_size)
    evaluation = evaluate_system(cfg, system, test_b, attacker_b.images, args.run)
    table = format_eval_table(evaluation)
    with open(os.path.join(args.run, "eval_table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    fresh = RunRecord.load(args.run)
    fresh.evaluation = evaluation
    fresh.save()
    render_plots(fresh, args.run)
    print(table, end="")
    return 0


def _cmd_attack(args):
    import torch

    from .adversary import DetectionReport, build_attack_dataset_from_features, heuristic_scores, train_attacker
    from .datagen import build_bundle, dataset_splits
    from .harness import _encode_dataset, _mix, load_system

    cfg, system, _ = load_system(args.run)
    d = cfg.data
    *_, attacker_seeds = dataset_splits(d.n_train, d.n_val, d.n_test, base_seed=d.base_seed,
                                        size=cfg.encoder.image_size, n_extra=d.n_attacker)
    bundle = build_bundle(attacker_seeds, size=cfg.encoder.image_size)
    images = torch.as_tensor(bundle.images)
    f_e, f_s = _encode_dataset(system, images)
    ch = cfg.channel.with_snr(args.snr)
    dataset = build_attack_dataset_from_features(f_e, f_s, ch, _mix(cfg.seed, 43, 990))
    result = train_attacker(dataset, cfg.attacker, _mix(cfg.seed, 47, 990))
    n = f_e.shape[0]
    hold_pairs = np.unique(dataset.pair_index.numpy()[result.holdout_indices])
    heur = heuristic_scores(dataset.features[hold_pairs], dataset.features[hold_pairs + n],
                            tau=cfg.loss.cts_temperature)
    report = DetectionReport(
        accuracy=result.accuracy, confusion=result.confusion.tolist(),
        heuristic_cosine=heur["cosine"], mi_proxy=heur["mi_proxy"],
        num_eval=int(result.confusion.sum()),
    )
    out_dir = os.path.join(args.run, "attackers")
    os.makedirs(out_dir, exist_ok=True)
    torch.save(result.detector.state_dict(), os.path.join(out_dir, f"snr_{args.snr:g}.pt"))
    print(json.dumps({
        "snr_db": args.snr,
        "accuracy": report.accuracy,
        "confusion": report.confusion,
        "heuristic_cosine": report.heuristic_cosine,
        "mi_proxy": report.mi_proxy,
        "num_eval": report.num_eval,
        "steps_run": result.steps_run,
    }, indent=1))
    return 0


def _cmd_complexity(args):
    from .complexity import system_cost
    from .gating import GatePolicy
    from .systems import build_encoder_config

    cfg = load_config(args.config, args.overrides)
    enc_cfg = build_encoder_config(cfg.encoder)
    policy = GatePolicy(enc_cfg.num_blocks)
    report = system_cost(enc_cfg, policy, cfg.decoder.hidden, cfg.data.num_classes,
                         num_modules=len(cfg.decoder.dilations))
    dense = {
        "per_block_flops": report.per_block_flops,
        "encoder_flops_by_path": report.encoder_flops_by_path,
        "decoder_flops_by_task": report.decoder_flops_by_task,
        "decoder_flops_reference_widths": report.decoder_flops_reference_widths,
        "num_modules": report.num_modules,
        "total_flops": report.total_flops,
        "param_count": report.param_count,
        "encoder_param_count": report.encoder_param_count,
        "dual_encoder_param_count": 2 * report.encoder_param_count,
    }
    print(json.dumps(dense, indent=1))
    return 0


def _cmd_sweep(args):
    from .harness import train_run

    values = [v.strip() for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = []
    for value in values:
        per_seed = []
        for seed in seeds:
            overrides = list(args.overrides) + [f"{args.param}={value}", f"seed={seed}"]
            cfg = load_config(args.config, overrides)
            record = train_run(cfg, run_root=args.output)
            key = max(record.evaluation, key=lambda k: float(k))
            row = record.evaluation[key]
            per_seed.append({
                "seed": seed,
                "run_dir": record.run_dir,
                "attacker_accuracy": row["detection"]["accuracy"],
                "covert_abs_err": row["depth"]["abs_err"],
                "stego_miou": row["stego_seg"]["miou"],
            })
        summary.append({
            "value": value,
            "runs": per_seed,
            "mean_attacker_accuracy": float(np.mean([r["attacker_accuracy"] for r in per_seed])),
            "mean_covert_abs_err": float(np.mean([r["covert_abs_err"] for r in per_seed])),
            "mean_stego_miou": float(np.mean([r["stego_miou"] for r in per_seed])),
        })
    out = {"param": args.param, "summary": summary}
    os.makedirs(args.output, exist_ok=True)
    path = os.path.join(args.output, "sweep_summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
    print(json.dumps(out, indent=1))
    return 0


_REPORT_METRICS = (
    ("miou_ste", lambda r: r["stego_seg"]["miou"], "higher_better"),
    ("pixacc_ste", lambda r: r["stego_seg"]["pixel_acc"], "higher_better"),
    ("abs_err", lambda r: r["depth"]["abs_err"], "lower_better"),
    ("delta1", lambda r: r["depth"]["delta1"], "higher_better"),
)


def _cmd_report(args):
    from .harness import RunRecord

    records = [RunRecord.load(d) for d in args.runs]
    rows = []
    for rec in records:
        if not rec.evaluation:
            raise ConfigurationError(f"run {rec.run_dir} has no evaluation")
        key = (f"{args.snr:g}" if args.snr is not None
               else max(rec.evaluation, key=lambda k: float(k)))
        if key not in rec.evaluation:
            raise ConfigurationError(f"run {rec.run_dir} was not evaluated at {key} dB")
        rows.append((rec.config["model"], rec.config["seed"], rec.evaluation[key]))

    ref_idx = 0
    if args.reference:
        matches = [i for i, (m, _, _) in enumerate(rows) if m == args.reference]
        if not matches:
            raise ConfigurationError(f"no run with model {args.reference!r}")
        ref_idx = matches[0]
    ref = rows[ref_idx][2]

    header = (f"{'model':>16} {'seed':>4} {'miou_exp':>9} {'miou_ste':>9} {'abs_err':>9} "
              f"{'att_acc':>9} {'heur_cos':>9} {'rel_task%':>9} {'rel_tra%':>9}")
    lines = [header]
    for model, seed, row in rows:
        rel_task = float(np.mean([
            relative_improvement(fn(row), fn(ref), direction)
            for _, fn, direction in _REPORT_METRICS
        ]))
        rel_tra = relative_improvement(row["detection"]["accuracy"],
                                       ref["detection"]["accuracy"], "lower_better")
        lines.append(
            f"{model:>16} {seed:>4} "
            f"{row['explicit_seg']['miou']:>9.6f} {row['stego_seg']['miou']:>9.6f} "
            f"{row['depth']['abs_err']:>9.6f} {row['detection']['accuracy']:>9.6f} "
            f"{row['detection']['heuristic_cosine']:>9.6f} {rel_task:>9.2f} {rel_tra:>9.2f}"
        )
    table = "\n".join(lines)
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="covertsem", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_args(p)
    p.add_argument("--output", default=None, help="run root (default: config output_root)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--snrs", default=None, help="comma list, e.g. -6,0,6")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("attack", help="train a detector against a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--snr", type=float, default=6.0)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("complexity", help="closed-form cost report")
    _add_config_args(p)
    p.set_defaults(fn=_cmd_complexity)

    p = sub.add_parser("sweep", help="grid over one config key x seeds")
    _add_config_args(p)
    p.add_argument("--param", required=True, help="dotted key, e.g. loss.lambda_cts")
    p.add_argument("--values", required=True, help="comma list of values")
    p.add_argument("--seeds", default="0", help="comma list of seeds")
    p.add_argument("--output", default="runs")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--reference", default=None, help="model name used as baseline")
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
