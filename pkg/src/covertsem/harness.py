"""Experiment harness: two-phase training, SNR sweeps, run records.

Phase 1 learns gate logits (Adam) jointly with network weights (SGD) under
soft gates and an annealed temperature. Phase 2 samples hard architectures
from the learned policy, retrains each with fixed gates, and deploys the one
with the lowest validation total loss. Baselines train in a single phase.

Every random draw derives from the run seed, so identical configurations
reproduce identical records bit for bit on one machine.
"""

from __future__ import annotations

import copy
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import channel as channel_mod
from . import gating
from .adversary import (
    AttackerResult,
    DetectionReport,
    build_attack_dataset_from_features,
    heuristic_scores,
    train_attacker,
)
from .codec import covert_loss, public_loss
from .complexity import (
    CostReport,
    decoder_cost,
    decoder_param_count,
    encoder_param_count,
    path_cost,
    per_block_costs,
    system_cost,
)
from .config import config_from_dict, config_to_dict, run_dir_name, save_config
from .datagen import dataset_splits
from .encoder import GateVector, HARD, soft_path_gates
from .errors import ConfigurationError, TrainingDiverged
from .gating import EXECUTE, EXPLICIT, STEGO, TemperatureSchedule
from .metrics import ConfusionAccumulator, depth_score
from .objectives import contrastive_loss, mi_proxy, sparsity_loss, total_loss
from .systems import (
    CovertSystem,
    NoisePerturbSystem,
    StackingSystem,
    StandardSemComSystem,
)

_EVAL_CHUNK = 32


def _mix(*parts):
    """Deterministic seed derivation from integer parts."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h * 0x100000001B3 + int(p) + 0x9E3779B9) % (2 ** 63 - 1)
    return h


@dataclass
class RunRecord:
    """Everything one training run produced; immutable once finalized."""

    config: dict
    run_dir: str
    loss_series: list = field(default_factory=list)
    candidate_summaries: list = field(default_factory=list)
    evaluation: dict = field(default_factory=dict)
    policy_summary: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    checkpoint: str = ""
    finalized: bool = False

    def _guard(self):
        if self.finalized:
            raise ConfigurationError("run record is finalized and cannot be mutated")

    def log_step(self, entry):
        self._guard()
        self.loss_series.append(entry)

    def finalize(self):
        self.finalized = True

    def save(self):
        os.makedirs(self.run_dir, exist_ok=True)
        with open(os.path.join(self.run_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
            for entry in self.loss_series:
                fh.write(json.dumps(entry) + "\n")
        body = {
            "config": self.config,
            "candidate_summaries": self.candidate_summaries,
            "evaluation": self.evaluation,
            "policy_summary": self.policy_summary,
            "cost": self.cost,
            "checkpoint": self.checkpoint,
            "finalized": self.finalized,
        }
        with open(os.path.join(self.run_dir, "record.json"), "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, run_dir):
        with open(os.path.join(run_dir, "record.json"), "r", encoding="utf-8") as fh:
            body = json.load(fh)
        series = []
        metrics_path = os.path.join(run_dir, "metrics.jsonl")
        if os.path.exists(metrics_path):
            with open(metrics_path, "r", encoding="utf-8") as fh:
                series = [json.loads(line) for line in fh if line.strip()]
        return cls(
            config=body["config"],
            run_dir=run_dir,
            loss_series=series,
            candidate_summaries=body.get("candidate_summaries", []),
            evaluation=body.get("evaluation", {}),
            policy_summary=body.get("policy_summary", {}),
            cost=body.get("cost", {}),
            checkpoint=body.get("checkpoint", ""),
            finalized=body.get("finalized", False),
        )


def build_system(cfg):
    builders = {
        "proposed": CovertSystem,
        "cosine_similarity_ablation": CovertSystem,
        "random_path": CovertSystem,
        "stacking_baseline": StackingSystem,
        "noise_baseline": NoisePerturbSystem,
        "standard_semcom": StandardSemComSystem,
    }
    return builders[cfg.model](cfg)


def _bundle_tensors(bundle):
    return (
        torch.as_tensor(bundle.images),
        torch.as_tensor(bundle.seg.astype(np.int64)),
        torch.as_tensor(bundle.depth),
    )


def _flat(t):
    return t.flatten(1)


def _zero(ref):
    return torch.zeros((), dtype=ref.dtype if isinstance(ref, torch.Tensor) else torch.float32)


class _Trainer:
    """Shared state for one run: data tensors, seeds, logging."""

    def __init__(self, cfg, system, record, data=None):
        self.cfg = cfg
        self.system = system
        self.record = record
        if data is None:
            d = cfg.data
            data = dataset_splits(
                d.n_train, d.n_val, d.n_test, base_seed=d.base_seed,
                size=cfg.encoder.image_size, n_extra=d.n_attacker,
            )
        self.train_b, self.val_b, self.test_b, self.attacker_seeds = data
        self.train_t = _bundle_tensors(self.train_b)
        self.val_t = _bundle_tensors(self.val_b)
        self.ch_train = cfg.train_channel

    def data_splits(self):
        return (self.train_b, self.val_b, self.test_b, self.attacker_seeds)

    # ---- loss terms shared across models ----

    def _decode_losses(self, r_exp, r_ste, y, d, public_shared=False):
        l_pe = public_loss(self.system.dec_p(r_exp), y)
        l_ps = l_pe if public_shared else public_loss(self.system.dec_p(r_ste), y)
        l_c = covert_loss(self.system.dec_c(r_ste), d)
        return l_pe, l_ps, l_c

    def _transmit_pair(self, f_exp, f_ste, step, tag):
        seed = self.cfg.seed
        r_e = channel_mod.transmit(f_exp, self.ch_train, _mix(seed, tag, step, 0)).data
        r_s = channel_mod.transmit(f_ste, self.ch_train, _mix(seed, tag, step, 1)).data
        return r_e, r_s

    def _cts_term(self, f_exp, f_ste):
        w = self.cfg.loss
        if self.cfg.model == "cosine_similarity_ablation":
            # raw cosine maximization in place of the contrastive objective
            anchor = _flat(f_exp)
            if self.cfg.training.stop_gradient_anchor:
                anchor = anchor.detach()
            a = torch.nn.functional.normalize(anchor, dim=1)
            b = torch.nn.functional.normalize(_flat(f_ste), dim=1)
            return 1.0 - (a * b).sum(dim=1).mean()
        return contrastive_loss(
            _flat(f_exp), _flat(f_ste), tau=w.cts_temperature,
            stop_gradient_anchor=self.cfg.training.stop_gradient_anchor,
        )

    # ---- per-model training steps (return LossBreakdown) ----

    def gated_step(self, x, y, d, step, gates_exp, gates_ste, soft):
        sys_ = self.system
        f_e = channel_mod.unit_power(sys_.encoder.forward_path(x, gates_exp, EXPLICIT).data)
        f_s = channel_mod.unit_power(sys_.encoder.forward_path(x, gates_ste, STEGO).data)
        r_e, r_s = self._transmit_pair(f_e, f_s, step, 13 if soft else 17)
        l_pe, l_ps, l_c = self._decode_losses(r_e, r_s, y, d)
        l_sp = sparsity_loss(sys_.policy, gates_exp, gates_ste,
                             beta=self.cfg.loss.beta, gamma=self.cfg.loss.gamma)
        l_cts = self._cts_term(f_e, f_s)
        return total_loss(l_pe, l_ps, l_c, l_sp, l_cts, self.cfg.loss)

    def baseline_step(self, x, y, d, step):
        sys_ = self.system
        f_e, f_s = sys_.encode_paths(x)
        r_e, r_s = self._transmit_pair(f_e, f_s, step, 19)
        shared = getattr(sys_, "public_stream_is_shared", False)
        l_pe, l_ps, l_c = self._decode_losses(r_e, r_s, y, d, public_shared=shared)
        if isinstance(sys_, NoisePerturbSystem):
            a = torch.nn.functional.normalize(_flat(f_e), dim=1)
            b = torch.nn.functional.normalize(_flat(f_s), dim=1)
            l_cts = 1.0 - (a * b).sum(dim=1).mean()
        else:
            l_cts = _zero(l_pe)
        return total_loss(l_pe, l_ps, l_c, _zero(l_pe), l_cts, self.cfg.loss)

    def random_path_step(self, x, y, d, step):
        sys_ = self.system
        gates_exp = sys_.deployed(EXPLICIT)
        gates_ste = sys_.deployed(STEGO)
        return self.gated_step(x, y, d, step, gates_exp, gates_ste, soft=False)

    # ---- loop driver ----

    def run_steps(self, phase, steps, step_fn, optimizers, schedule=None, log=True):
        cfg = self.cfg
        images, seg, dep = self.train_t
        n = images.shape[0]
        batch_rng = np.random.default_rng(_mix(cfg.seed, 7, zlib.crc32(phase.encode())))
        self.system.train()
        for step in range(steps):
            if schedule is not None:
                self.system.policy.gate_temperature = schedule.value(step)
            idx = torch.as_tensor(batch_rng.integers(0, n, cfg.training.batch_size))
            bd = step_fn(images[idx], seg[idx], dep[idx], step)
            if not torch.isfinite(bd.l_total):
                raise TrainingDiverged(
                    f"non-finite loss in phase {phase!r} at step {step}", phase=phase, step=step
                )
            for opt in optimizers:
                opt.zero_grad()
            bd.l_total.backward()
            if cfg.training.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(
                    [p for opt in optimizers for g in opt.param_groups for p in g["params"]],
                    cfg.training.grad_clip,
                )
            for opt in optimizers:
                opt.step()
            if log and (step % cfg.training.log_every == 0 or step == steps - 1):
                entry = {"phase": phase, "step": step, **bd.detached()}
                if schedule is not None:
                    entry["tau_g"] = self.system.policy.gate_temperature
                self.record.log_step(entry)

    def validation_total(self):
        """Mean total loss over the validation split with fixed channel draws."""
        sys_ = self.system
        was = sys_.training
        sys_.eval()
        images, seg, dep = self.val_t
        totals, counts = [], []
        with torch.no_grad():
            for ci, start in enumerate(range(0, images.shape[0], _EVAL_CHUNK)):
                x = images[start:start + _EVAL_CHUNK]
                y = seg[start:start + _EVAL_CHUNK]
                d = dep[start:start + _EVAL_CHUNK]
                f_e, f_s = sys_.encode_paths(x)
                seed = self.cfg.seed
                r_e = channel_mod.transmit(f_e, self.ch_train, _mix(seed, 31, ci, 0)).data
                r_s = channel_mod.transmit(f_s, self.ch_train, _mix(seed, 31, ci, 1)).data
                shared = getattr(sys_, "public_stream_is_shared", False)
                l_pe = public_loss(sys_.dec_p(r_e), y)
                l_ps = l_pe if shared else public_loss(sys_.dec_p(r_s), y)
                l_c = covert_loss(sys_.dec_c(r_s), d)
                if getattr(sys_, "policy", None) is not None:
                    l_sp = sparsity_loss(sys_.policy, sys_.deployed(EXPLICIT), sys_.deployed(STEGO),
                                         beta=self.cfg.loss.beta, gamma=self.cfg.loss.gamma)
                else:
                    l_sp = _zero(l_pe)
                bd = total_loss(l_pe, l_ps, l_c, l_sp, self._cts_term(f_e, f_s), self.cfg.loss)
                totals.append(float(bd.l_total))
                counts.append(x.shape[0])
        sys_.train(was)
        return float(np.average(totals, weights=counts))


def _train_proposed(cfg, system, trainer, record):
    tr = cfg.training
    policy = system.policy
    mand = system.encoder.mandatory
    schedule = TemperatureSchedule(tr.tau_start, tr.tau_end, tr.policy_steps)
    opt_w = torch.optim.SGD(system.network_parameters(), lr=tr.weight_lr, momentum=tr.momentum)
    opt_a = torch.optim.Adam([policy.logits], lr=tr.policy_lr)

    def soft_step(x, y, d, step):
        noise_e = gating.sample_gumbel_noise((policy.num_blocks, 2), _mix(cfg.seed, 11, step, 0))
        noise_s = gating.sample_gumbel_noise((policy.num_blocks, 2), _mix(cfg.seed, 11, step, 1))
        u_e = soft_path_gates(policy, EXPLICIT, noise_e, mand)
        u_s = soft_path_gates(policy, STEGO, noise_s, mand)
        return trainer.gated_step(x, y, d, step, u_e, u_s, soft=True)

    trainer.run_steps("policy", tr.policy_steps, soft_step, [opt_w, opt_a], schedule=schedule)

    # Phase 2: sample hard architectures from the policy, retrain, pick best.
    q_e = gating.activation_distributions(policy, EXPLICIT)[:, EXECUTE].numpy(force=True)
    q_s = gating.activation_distributions(policy, STEGO)[:, EXECUTE].numpy(force=True)
    arch_rng = np.random.default_rng(_mix(cfg.seed, 23))
    mand_np = mand.numpy(force=True).astype(bool)

    def draw(q):
        u = (arch_rng.random(policy.num_blocks) < q).astype(np.float32)
        u[mand_np] = 1.0
        return torch.as_tensor(u)

    candidates = [(draw(q_e), draw(q_s)) for _ in range(tr.num_sampled_architectures)]

    best_state, best_val, best_idx = None, float("inf"), -1
    for ci, (u_e, u_s) in enumerate(candidates):
        if tr.retrain_from_scratch:
            with torch.random.fork_rng():
                torch.manual_seed(_mix(cfg.seed, 29, ci))
                cand = build_system(cfg)
            cand.policy.load_state_dict(policy.state_dict())
        else:
            cand = copy.deepcopy(system)
        cand.set_deployed(EXPLICIT, u_e)
        cand.set_deployed(STEGO, u_s)
        cand_trainer = _Trainer(cfg, cand, record, data=trainer.data_splits())
        opt = torch.optim.SGD(cand.network_parameters(), lr=tr.weight_lr, momentum=tr.momentum)

        def hard_step(x, y, d, step, _ue=u_e, _us=u_s, _t=cand_trainer):
            return _t.gated_step(x, y, d, step, _ue, _us, soft=False)

        cand_trainer.run_steps(f"retrain_{ci}", tr.retrain_steps, hard_step, [opt])
        val = cand_trainer.validation_total()
        record.candidate_summaries.append({
            "candidate": ci,
            "gates_explicit": u_e.tolist(),
            "gates_stego": u_s.tolist(),
            "validation_total": val,
        })
        if val < best_val:
            best_val, best_idx = val, ci
            best_state = copy.deepcopy(cand.state_dict())
    system.load_state_dict(best_state)
    record.candidate_summaries.append({"selected": best_idx, "validation_total": best_val})


def _train_random_path(cfg, system, trainer, record):
    tr = cfg.training
    rng = np.random.default_rng(_mix(cfg.seed, 37))
    mand_np = system.encoder.mandatory.numpy(force=True).astype(bool)
    for path in (EXPLICIT, STEGO):
        u = (rng.random(system.policy.num_blocks) < 0.5).astype(np.float32)
        u[mand_np] = 1.0
        system.set_deployed(path, torch.as_tensor(u))
    # Mirror the frozen random architecture into the logits for inspection.
    with torch.no_grad():
        for pi, path in enumerate(gating.PATHS):
            dep = system.deployed(path)
            system.policy.logits[pi, :, EXECUTE] = 2.0 * dep - 1.0
            system.policy.logits[pi, :, gating.SKIP] = 0.0
    opt = torch.optim.SGD(system.network_parameters(), lr=tr.weight_lr, momentum=tr.momentum)
    trainer.run_steps("train", tr.retrain_steps, trainer.random_path_step, [opt])


def _train_baseline(cfg, system, trainer, record):
    tr = cfg.training
    opt = torch.optim.SGD(system.network_parameters(), lr=tr.weight_lr, momentum=tr.momentum)
    trainer.run_steps("train", tr.retrain_steps, trainer.baseline_step, [opt])


def _policy_summary(system):
    if getattr(system, "policy", None) is None:
        return {}
    out = {}
    for path in gating.PATHS:
        q = gating.activation_distributions(system.policy, path)[:, EXECUTE].detach()
        out[f"execute_prob_{path}"] = [round(float(v), 6) for v in q]
        out[f"deployed_{path}"] = [float(v) for v in system.deployed(path)]
    return out


def cost_for(cfg, system):
    """CostReport reflecting the deployed architecture of a trained system."""
    enc_cfg = system.encoder_cfg
    hidden = cfg.decoder.hidden
    ncls = cfg.data.num_classes
    m = len(cfg.decoder.dilations)
    if isinstance(system, CovertSystem):
        gates = {p: GateVector(system.deployed(p).clone(), HARD) for p in gating.PATHS}
        return system_cost(enc_cfg, system.policy, hidden, ncls, num_modules=m, gates=gates)

    dense = path_cost(enc_cfg, [1.0] * enc_cfg.num_blocks)
    if isinstance(system, NoisePerturbSystem):
        # one backbone plus the perturbation net (per conv 2*K^2*Cin*Cout*H*W)
        h_cur = enc_cfg.input_shape[1]
        perturb_flops = 0
        for layer in system.perturb.net:
            if isinstance(layer, torch.nn.Conv2d):
                h_cur = h_cur // layer.stride[0]
                perturb_flops += (2 * layer.kernel_size[0] ** 2 * layer.in_channels
                                  * layer.out_channels * h_cur * h_cur)
        enc_by_path = {EXPLICIT: int(dense), STEGO: int(dense + perturb_flops)}
        enc_params = encoder_param_count(enc_cfg)
        enc_params += int(sum(p.numel() for p in system.perturb.parameters()) + 1)
    else:
        # dual dense encoders; the joint session runs both
        enc_by_path = {EXPLICIT: int(dense), STEGO: int(2 * dense)}
        enc_params = 2 * encoder_param_count(enc_cfg)

    c_out, h, w = enc_cfg.output_shape
    dec_by_task = {
        "public": decoder_cost(c_out, hidden, ncls, h, w),
        "covert": decoder_cost(c_out, hidden, 1, h, w),
    }
    dec_params = (
        decoder_param_count(c_out, hidden, ncls, m) + decoder_param_count(c_out, hidden, 1, m)
    )
    total = sum(enc_by_path.values()) + m * sum(dec_by_task.values())
    return CostReport(
        per_block_flops=list(per_block_costs(enc_cfg)),
        encoder_flops_by_path=enc_by_path,
        decoder_flops_by_task=dec_by_task,
        num_modules=m,
        total_flops=int(total),
        param_count=enc_params + dec_params,
        encoder_param_count=enc_params,
    )


def _cost_to_dict(report):
    return {
        "per_block_flops": report.per_block_flops,
        "encoder_flops_by_path": report.encoder_flops_by_path,
        "decoder_flops_by_task": report.decoder_flops_by_task,
        "num_modules": report.num_modules,
        "total_flops": report.total_flops,
        "param_count": report.param_count,
        "encoder_param_count": report.encoder_param_count,
        "decoder_flops_reference_widths": report.decoder_flops_reference_widths,
    }


def _encode_dataset(system, images, chunk=_EVAL_CHUNK):
    feats_e, feats_s = [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            f_e, f_s = system.encode_paths(images[start:start + chunk])
            feats_e.append(f_e)
            feats_s.append(f_s)
    return torch.cat(feats_e), torch.cat(feats_s)


def evaluate_system(cfg, system, test_bundle, attacker_images, run_dir=None):
    """Task metrics, detection, and heuristics at every evaluation SNR."""
    system.eval()
    images, seg, dep = _bundle_tensors(test_bundle)
    f_test_e, f_test_s = _encode_dataset(system, images)
    att_images = torch.as_tensor(np.asarray(attacker_images, dtype=np.float32))
    f_att_e, f_att_s = _encode_dataset(system, att_images)
    shared = getattr(system, "public_stream_is_shared", False)

    results = {}
    for si, snr in enumerate(cfg.eval_snrs):
        ch = cfg.channel.with_snr(float(snr))
        conf_e = ConfusionAccumulator(cfg.data.num_classes)
        conf_s = ConfusionAccumulator(cfg.data.num_classes)
        depth_preds = []
        with torch.no_grad():
            for ci, start in enumerate(range(0, images.shape[0], _EVAL_CHUNK)):
                end = start + _EVAL_CHUNK
                r_e = channel_mod.transmit(f_test_e[start:end], ch, _mix(cfg.seed, 41, si, ci, 0)).data
                r_s = channel_mod.transmit(f_test_s[start:end], ch, _mix(cfg.seed, 41, si, ci, 1)).data
                pred_e = system.dec_p(r_e).argmax(dim=1)
                pred_s = system.dec_p(r_e if shared else r_s).argmax(dim=1)
                conf_e.update(pred_e.numpy(), test_bundle.seg[start:end])
                conf_s.update(pred_s.numpy(), test_bundle.seg[start:end])
                depth_preds.append(system.dec_c(r_s).squeeze(1).numpy())
        seg_e = conf_e.scores()
        seg_s = conf_s.scores()
        dsc = depth_score(np.concatenate(depth_preds), test_bundle.depth)

        dataset = build_attack_dataset_from_features(f_att_e, f_att_s, ch, _mix(cfg.seed, 43, si))
        result = train_attacker(dataset, cfg.attacker, _mix(cfg.seed, 47, si))
        n_pairs = f_att_e.shape[0]
        hold_pairs = np.unique(dataset.pair_index.numpy()[result.holdout_indices])
        heur = heuristic_scores(
            dataset.features[hold_pairs],
            dataset.features[hold_pairs + n_pairs],
            tau=cfg.loss.cts_temperature,
        )
        report = DetectionReport(
            accuracy=result.accuracy,
            confusion=result.confusion.tolist(),
            heuristic_cosine=heur["cosine"],
            mi_proxy=heur["mi_proxy"],
            num_eval=int(result.confusion.sum()),
        )
        if run_dir:
            att_dir = os.path.join(run_dir, "attackers")
            os.makedirs(att_dir, exist_ok=True)
            torch.save(result.detector.state_dict(), os.path.join(att_dir, f"snr_{snr:g}.pt"))
        results[f"{float(snr):g}"] = {
            "snr_db": float(snr),
            "explicit_seg": {"miou": seg_e.miou, "pixel_acc": seg_e.pixel_acc},
            "stego_seg": {"miou": seg_s.miou, "pixel_acc": seg_s.pixel_acc},
            "depth": {
                "abs_err": dsc.abs_err, "rel_err": dsc.rel_err,
                "delta1": dsc.delta1, "delta2": dsc.delta2, "delta3": dsc.delta3,
            },
            "detection": {
                "accuracy": report.accuracy,
                "confusion": report.confusion,
                "heuristic_cosine": report.heuristic_cosine,
                "mi_proxy": report.mi_proxy,
                "num_eval": report.num_eval,
                "attacker_steps": result.steps_run,
            },
        }
    return results


_TABLE_COLUMNS = (
    ("snr_db", lambda r: r["snr_db"]),
    ("miou_exp", lambda r: r["explicit_seg"]["miou"]),
    ("pixacc_exp", lambda r: r["explicit_seg"]["pixel_acc"]),
    ("miou_ste", lambda r: r["stego_seg"]["miou"]),
    ("pixacc_ste", lambda r: r["stego_seg"]["pixel_acc"]),
    ("abs_err", lambda r: r["depth"]["abs_err"]),
    ("rel_err", lambda r: r["depth"]["rel_err"]),
    ("delta1", lambda r: r["depth"]["delta1"]),
    ("delta2", lambda r: r["depth"]["delta2"]),
    ("delta3", lambda r: r["depth"]["delta3"]),
    ("att_acc", lambda r: r["detection"]["accuracy"]),
    ("heur_cos", lambda r: r["detection"]["heuristic_cosine"]),
    ("mi_proxy", lambda r: r["detection"]["mi_proxy"]),
)


def format_eval_table(evaluation):
    """Fixed-width table, 6 decimals everywhere; stable across reruns."""
    header = "  ".join(f"{name:>10}" for name, _ in _TABLE_COLUMNS)
    lines = [header]
    for key in sorted(evaluation, key=lambda k: float(k)):
        row = evaluation[key]
        lines.append("  ".join(f"{fn(row):>10.6f}" for _, fn in _TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def render_plots(record, run_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(os.path.join(run_dir, "plots"), exist_ok=True)
    rows = [record.evaluation[k] for k in sorted(record.evaluation, key=lambda k: float(k))]
    if rows:
        snrs = [r["snr_db"] for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(snrs, [r["detection"]["accuracy"] for r in rows], "o-", label="trained detector")
        ax.plot(snrs, [r["detection"]["heuristic_cosine"] for r in rows], "s--", label="pairwise cosine")
        ax.axhline(0.5, color="gray", lw=0.8, ls=":")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("accuracy / similarity")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, "plots", "detection_vs_snr.png"), dpi=120)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(snrs, [r["explicit_seg"]["miou"] for r in rows], "o-", label="mIoU explicit")
        ax.plot(snrs, [r["stego_seg"]["miou"] for r in rows], "s-", label="mIoU stego")
        ax2 = ax.twinx()
        ax2.plot(snrs, [r["depth"]["abs_err"] for r in rows], "d--", color="tab:red", label="depth abs err")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("mIoU")
        ax2.set_ylabel("abs err")
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, "plots", "tasks_vs_snr.png"), dpi=120)
        plt.close(fig)

    probs = record.policy_summary
    if probs:
        fig, ax = plt.subplots(figsize=(6, 2.2))
        mat = np.array([probs[f"execute_prob_{p}"] for p in gating.PATHS])
        im = ax.imshow(mat, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_yticks([0, 1], list(gating.PATHS))
        ax.set_xlabel("block")
        fig.colorbar(im, ax=ax, label="execute prob")
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, "plots", "policy_heatmap.png"), dpi=120)
        plt.close(fig)


def train_run(cfg, run_root=None, evaluate=True):
    """Train one configuration end to end and persist its RunRecord."""
    root = run_root or cfg.output_root
    run_dir = os.path.join(root, run_dir_name(cfg))
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg, os.path.join(run_dir, "config.yaml"))

    torch.manual_seed(_mix(cfg.seed, 3))
    system = build_system(cfg)
    record = RunRecord(config=config_to_dict(cfg), run_dir=run_dir)
    trainer = _Trainer(cfg, system, record)

    if cfg.model in ("proposed", "cosine_similarity_ablation"):
        _train_proposed(cfg, system, trainer, record)
    elif cfg.model == "random_path":
        _train_random_path(cfg, system, trainer, record)
    else:
        _train_baseline(cfg, system, trainer, record)

    record.policy_summary = _policy_summary(system)
    record.cost = _cost_to_dict(cost_for(cfg, system))

    checkpoint = os.path.join(run_dir, "checkpoint.pt")
    torch.save({"model": cfg.model, "state": system.state_dict()}, checkpoint)
    record.checkpoint = checkpoint

    if evaluate:
        from .datagen import build_bundle
        attacker_bundle = build_bundle(trainer.attacker_seeds, size=cfg.encoder.image_size)
        record.evaluation = evaluate_system(cfg, system, trainer.test_b,
                                            attacker_bundle.images, run_dir)
        with open(os.path.join(run_dir, "eval_table.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_eval_table(record.evaluation))
        render_plots(record, run_dir)

    record.finalize()
    record.save()
    return record


def load_system(run_dir):
    """Rebuild a trained system from its run directory."""
    record = RunRecord.load(run_dir)
    cfg = config_from_dict(record.config)
    system = build_system(cfg)
    payload = torch.load(os.path.join(run_dir, "checkpoint.pt"), weights_only=True)
    system.load_state_dict(payload["state"])
    system.eval()
    return cfg, system, record
