"""Command-line entry point wiring simulation, training and evaluation.

Subcommands: gen-data, train, evaluate, baseline, report-memory,
uncertainty. Experiments are driven by a flat JSON config document whose
sha256 hash lands in every output manifest; reruns with the same config
and seed write byte-identical reports.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import quant as q
from . import ternary as tern
from . import training as tr
from .engine import EngineError, ModelSpec, build_model, load_model, save_model
from .evaluation import (
    CFARConfig,
    aggregate_reports,
    evaluate_model,
    memory_report,
    ops_report,
    write_f1_csv,
    write_memory_csv,
    write_mops_csv,
)
from .sim import (
    RadarConfig,
    ScenarioConfig,
    gen_dataset,
    load_dataset,
    radar_from_dict,
    save_dataset,
    scenario_from_dict,
)


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    # radar / scenario
    "n_fast": 96,
    "m_ramps": 96,
    "sample_period": 25e-9,
    "window": "hann",
    "noise_power": 1e-3,
    "n_objects_range": [1, 5],
    "object_amplitude_range": [0.03, 1.0],
    "interference": True,
    "burst_count_range": [2, 5],
    "burst_amplitude_range": [8.0, 30.0],
    # splits
    "train_size": 32,
    "val_size": 8,
    "test_size": 8,
    # model / optimizer
    "model": "L3-C16-B",
    "epochs": 8,
    "batch_size": 16,
    "lr": 1e-3,
    "seeds": [1],
    # quantization
    "quant": "none",        # none | binary | int
    "bits": 8,              # k or "learned"
    "target": "wa",         # w | a | wa
    "range": "stat",        # stat | learned | none
    "gamma0": 0.01,
    # ternary distributions
    "lambda": 1e-10,
    "extract": "mp",        # mp | s1 | sN
    "extract_samples": 20,
    # detection
    "cfar_scale": 7.0,
    "cfar_guard": 2,
    "cfar_train": 8,
    "seed": 0,
}

_TARGETS = {"w": "weights", "a": "activations", "wa": "both"}
_RANGES = {"stat": "statistics", "learned": "learned", "none": "none"}


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a flat JSON object")
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    if not cfg["seeds"]:
        raise ConfigError("seeds list must be nonempty")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _radar(cfg: dict) -> RadarConfig:
    return RadarConfig(
        n_fast=int(cfg["n_fast"]),
        m_ramps=int(cfg["m_ramps"]),
        sample_period=float(cfg["sample_period"]),
        window=cfg["window"],
        rng_seed=int(cfg["seed"]),
    )


def _scenario(cfg: dict) -> ScenarioConfig:
    from .sim import InterfererConfig

    interferer = None
    if cfg["interference"]:
        interferer = InterfererConfig(
            burst_count_range=tuple(cfg["burst_count_range"]),
            amplitude_range=tuple(cfg["burst_amplitude_range"]),
        )
    return ScenarioConfig(
        n_objects_range=tuple(cfg["n_objects_range"]),
        amplitude_range=tuple(cfg["object_amplitude_range"]),
        noise_power=float(cfg["noise_power"]),
        interferer=interferer,
    )


def _cfar(cfg: dict) -> CFARConfig:
    g, t = int(cfg["cfar_guard"]), int(cfg["cfar_train"])
    return CFARConfig(guard_range=g, guard_doppler=g, train_range=t,
                      train_doppler=t, scale=float(cfg["cfar_scale"]))


def _train_cfg(cfg: dict, seed: int) -> tr.TrainConfig:
    return tr.TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                          lr=float(cfg["lr"]), seed=seed)


def _quant_spec(cfg: dict) -> q.QuantSpec:
    mode = {"binary": "binary", "int": "integer"}.get(cfg["quant"])
    if mode is None:
        raise ConfigError(f"--quant must be none/binary/int, got {cfg['quant']!r}")
    bits = 1 if mode == "binary" else cfg["bits"]
    return q.QuantSpec(target=_TARGETS[cfg["target"]], mode=mode, bits=bits,
                       range_mode=_RANGES[cfg["range"]])


def write_train_log(path, logs):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_mse", "val_f1", "gamma", "avg_bits"])
        for row in logs:
            w.writerow([row.epoch, f"{row.train_mse:.8e}", f"{row.val_f1:.6f}",
                        f"{row.gamma:.6g}", f"{row.avg_bits:.3f}"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out: Path) -> int:
    radar = _radar(cfg)
    scen = _scenario(cfg)
    sizes = (int(cfg["train_size"]), int(cfg["val_size"]), int(cfg["test_size"]))
    splits = gen_dataset(radar, scen, sizes)
    save_dataset(out, radar, scen, splits,
                 extra_meta={"config_hash": config_hash(cfg),
                             "split_sizes": list(sizes)})
    print(f"dataset written to {out} (train/val/test = {sizes[0]}/{sizes[1]}/{sizes[2]})")
    return 0


def _load_dataset_dir(path) -> tuple:
    p = Path(path)
    if not (p / "meta.json").exists():
        raise FileNotFoundError(f"dataset directory {p} has no meta.json")
    return load_dataset(p)


def cmd_train(cfg: dict, dataset_dir: str, mode: str, out: Path) -> int:
    _, _, (train, val, _) = _load_dataset_dir(dataset_dir)
    cfar = _cfar(cfg)
    spec = ModelSpec.from_name(cfg["model"])
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg["seeds"]:
        seed = int(seed)
        model = build_model(spec, np.random.default_rng(seed))
        tcfg = _train_cfg(cfg, seed)
        if mode == "real":
            logs = tr.train_real(model, train, val, tcfg, cfar)
            save_model(out / f"model_real_seed{seed}.ckpt", model,
                       extra={"config_hash": config_hash(cfg), "seed": seed})
        elif mode == "qat":
            qspec = _quant_spec(cfg)
            bit_cfg = q.BitLossConfig(gamma0=float(cfg["gamma0"]))
            state, snap, logs = tr.train_qat(model, train, val, qspec, tcfg, cfar, bit_cfg)
            q.save_qat_model(
                out / f"model_qat_seed{seed}.ckpt", model, snap,
                extra={"config_hash": config_hash(cfg), "seed": seed,
                       "weight_bits": snap.weight_bits, "act_bits": snap.act_bits},
            )
        elif mode == "dist":
            pre = tr.train_real(model, train, val, tcfg, cfar)
            dist = tern.dist_from_model(model, lam=float(cfg["lambda"]))
            logs = pre + tr.train_dist(dist, train, val, tcfg, cfar)
            tern.save_dist(out / f"model_dist_seed{seed}.ckpt", dist,
                           extra={"config_hash": config_hash(cfg), "seed": seed})
        else:
            raise ConfigError(f"unknown training mode {mode!r}")
        write_train_log(out / f"train_log_{mode}_seed{seed}.csv", logs)
        print(f"seed {seed}: final val F1 {logs[-1].val_f1:.4f}")
    return 0


def _baseline_predictors(name: str, cfg: dict, radar, scen, test, truths):
    bcfg = bl.BaselineConfig(
        detector_accuracy=float(cfg.get("det_acc", 0.9)),
        imat_iterations=int(cfg.get("imat_iters", 10)),
        imat_threshold_decay=float(cfg.get("imat_decay", 0.8)),
    )
    from .sim import range_doppler

    rng = np.random.default_rng(int(cfg["seed"]) + 7919)
    preds = []
    for sample, truth in zip(test, truths):
        if name == "identity" or name == "interfered":
            preds.append(sample.interfered)
            continue
        if name == "clean":
            preds.append(sample.clean)
            continue
        if name == "rfmin":
            preds.append(bl.ramp_filter(truth.frame_interfered, radar, bcfg.rfmin_clip))
            continue
        mask = bl.detect_interference(
            truth.frame_interfered, truth.interference_mask, bcfg.detector_accuracy, rng
        )
        if name == "zeroing":
            frame = bl.zeroing(truth.frame_interfered, mask)
        elif name == "imat":
            frame = bl.imat(truth.frame_interfered, mask, bcfg)
        else:
            raise ConfigError(f"unknown baseline {name!r}")
        preds.append(range_doppler(frame, radar))
    return preds


def _regen_truth(radar, scen, sizes):
    _, truths = gen_dataset(radar, scen, sizes, return_truth=True)
    return truths


def cmd_baseline(cfg: dict, dataset_dir: str, method: str, out: Path) -> int:
    radar, scen, (train, val, test) = _load_dataset_dir(dataset_dir)
    sizes = (len(train), len(val), len(test))
    truths = _regen_truth(radar, scen, sizes)[2]
    preds = _baseline_predictors(method, cfg, radar, scen, test, truths)
    from .evaluation import evaluate_predictions

    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_predictions(preds, test, _cfar(cfg))
    write_f1_csv(out / f"f1_per_sample_{method}.csv", report)
    print(f"{method}: mean F1 {report.mean_f1:.4f} (std {report.std_f1:.4f})")
    return 0


def cmd_evaluate(cfg: dict, dataset_dir: str, checkpoints, baseline_name, out: Path) -> int:
    radar, scen, (train, val, test) = _load_dataset_dir(dataset_dir)
    cfar = _cfar(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if baseline_name:
        sizes = (len(train), len(val), len(test))
        needs_truth = baseline_name in ("zeroing", "imat", "rfmin")
        truths = _regen_truth(radar, scen, sizes)[2] if needs_truth else [None] * len(test)
        preds = _baseline_predictors(baseline_name, cfg, radar, scen, test, truths)
        from .evaluation import evaluate_predictions

        report = evaluate_predictions(preds, test, cfar)
        write_f1_csv(out / "f1_per_sample.csv", report)
        print(f"{baseline_name}: mean F1 {report.mean_f1:.4f} (std {report.std_f1:.4f})")
        return 0
    reports = []
    spec = None
    wbits, abits = 32, 32
    for ck in checkpoints:
        meta_kind = None
        try:
            from .engine import read_container

            meta, _ = read_container(ck)
            meta_kind = meta.get("kind")
        except EngineError as e:
            raise ConfigError(str(e)) from e
        if meta_kind == "ternary":
            dist = tern.load_dist(ck)
            model = tern.extract_mp(dist)
            spec = model.spec
        else:
            model = load_model(ck)
            spec = model.spec
            if meta_kind == "qat":
                wbits = [rec["k"] for rec in meta["quant_layers"]]
                abits_meta = meta.get("act_bits")
                abits = abits_meta if abits_meta else 32
        reports.append(evaluate_model(tr.Predictor(model), test, cfar))
    agg = aggregate_reports(reports)
    write_f1_csv(out / "f1_per_sample.csv", agg)
    mem = memory_report(spec, radar.rd_cells, weight_bits=wbits, act_bits=abits)
    ops = ops_report(spec, radar.rd_cells)
    write_memory_csv(out / "memory.csv", [{
        "arch": spec.name, "params": spec.conv_weight_count(),
        "weight_kb": mem.weight_kb, "activation_kb": mem.activation_kb,
        "total_kb": mem.total_kb,
    }])
    write_mops_csv(out / "mops.csv", [{
        "arch": spec.name, "macs": ops.macs, "act_ops": ops.act_ops, "mops": ops.mops,
    }])
    print(f"mean F1 {agg.mean_f1:.4f} (std {agg.std_f1:.4f}, {agg.n_seeds} seeds); "
          f"memory {mem.total_kb:.2f} kB; {ops.mops:.2f} MOPS")
    return 0


def cmd_report_memory(arch: str, bits, act_bits, rd_cells: int) -> int:
    try:
        spec = ModelSpec.from_name(arch)
    except EngineError as e:
        raise ConfigError(str(e)) from e
    wb = bits if bits != "learned" else 32
    ab = act_bits if act_bits is not None else wb
    mem = memory_report(spec, rd_cells, weight_bits=int(wb), act_bits=int(ab))
    ops = ops_report(spec, rd_cells)
    print(f"arch {spec.name}  channels {spec.channels}")
    print(f"params {spec.conv_weight_count()}")
    print(f"weights_kb {mem.weight_kb:.2f}")
    print(f"activations_kb {mem.activation_kb:.2f}")
    print(f"total_kb {mem.total_kb:.2f}")
    print(f"total_mb {mem.total_bytes / 1048576:.2f}")
    print(f"mops {ops.mops:.2f}")
    return 0


def cmd_uncertainty(cfg: dict, dataset_dir: str, checkpoint: str, out: Path,
                    sample_index: int, n_samples: int) -> int:
    _, _, (_, _, test) = _load_dataset_dir(dataset_dir)
    dist = tern.load_dist(checkpoint)
    if not 0 <= sample_index < len(test):
        raise ConfigError(f"sample index {sample_index} outside test split")
    sample = test[sample_index]

    def predict(model, s):
        return tr.Predictor(model)(s).data

    rng = np.random.default_rng(int(cfg["seed"]))
    mean_map, std_map = tern.uncertainty_map(dist, predict, sample, n_samples, rng)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "uncertainty_mean_db.npy", mean_map.astype(np.float32))
    np.save(out / "uncertainty_std_db.npy", std_map.astype(np.float32))
    print(f"uncertainty grids written to {out} "
          f"(mean std {std_map.mean():.3f} dB over {n_samples} draws)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radden",
                                 description="quantized radar interference mitigation experiments")
    ap.add_argument("--config", help="flat JSON config document")
    ap.add_argument("--seed", type=int, help="root RNG seed override")
    ap.add_argument("--out", default="out", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate and persist a dataset")

    p_train = sub.add_parser("train", help="train models")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--mode", choices=["real", "qat", "dist"], default="real")
    p_train.add_argument("--quant", choices=["none", "binary", "int"])
    p_train.add_argument("--bits")
    p_train.add_argument("--target", choices=["w", "a", "wa"])
    p_train.add_argument("--range", choices=["stat", "learned", "none"])
    p_train.add_argument("--gamma0", type=float)
    p_train.add_argument("--lambda", dest="lam", type=float)
    p_train.add_argument("--dist-ternary", action="store_true",
                         help="alias for --mode dist")
    p_train.add_argument("--model")
    p_train.add_argument("--epochs", type=int)

    p_eval = sub.add_parser("evaluate", help="evaluate checkpoints or a baseline")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", nargs="*", default=[])
    p_eval.add_argument("--baseline",
                        choices=["identity", "interfered", "clean", "zeroing", "imat", "rfmin"])

    p_base = sub.add_parser("baseline", help="run a classical mitigation baseline")
    p_base.add_argument("--dataset", required=True)
    p_base.add_argument("--method", required=True, choices=["zeroing", "imat", "rfmin"])
    p_base.add_argument("--det-acc", type=float, default=0.9)
    p_base.add_argument("--imat-iters", type=int, default=10)
    p_base.add_argument("--imat-decay", type=float, default=0.8)

    p_mem = sub.add_parser("report-memory", help="parameter/memory/MOPS table row")
    p_mem.add_argument("arch", help="architecture name, e.g. L3-C16-B")
    p_mem.add_argument("--bits", default="32")
    p_mem.add_argument("--act-bits", default=None)
    p_mem.add_argument("--rd-cells", type=int, default=9216)

    p_unc = sub.add_parser("uncertainty", help="sampled-weight uncertainty grids")
    p_unc.add_argument("--dataset", required=True)
    p_unc.add_argument("--checkpoint", required=True)
    p_unc.add_argument("--sample-index", type=int, default=0)
    p_unc.add_argument("--draws", type=int, default=30)
    p_unc.add_argument("--uncertainty-out", default=None)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed}
        if args.command == "train":
            if args.dist_ternary:
                args.mode = "dist"
            overrides.update({
                "quant": args.quant, "bits": _parse_bits(args.bits),
                "target": args.target, "range": args.range, "gamma0": args.gamma0,
                "lambda": args.lam, "model": args.model, "epochs": args.epochs,
            })
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.mode, out)
        if args.command == "evaluate":
            if not args.checkpoint and not args.baseline:
                raise ConfigError("evaluate needs --checkpoint or --baseline")
            return cmd_evaluate(cfg, args.dataset, args.checkpoint, args.baseline, out)
        if args.command == "baseline":
            cfg.update({"det_acc": args.det_acc, "imat_iters": args.imat_iters,
                        "imat_decay": args.imat_decay})
            return cmd_baseline(cfg, args.dataset, args.method, out)
        if args.command == "report-memory":
            return cmd_report_memory(args.arch, _parse_bits(args.bits),
                                     args.act_bits, args.rd_cells)
        if args.command == "uncertainty":
            out = Path(args.uncertainty_out) if args.uncertainty_out else out
            return cmd_uncertainty(cfg, args.dataset, args.checkpoint, out,
                                   args.sample_index, args.draws)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return 3
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


def _parse_bits(b):
    if b is None or b == "learned":
        return b
    return int(b)


if __name__ == "__main__":
    sys.exit(main())
