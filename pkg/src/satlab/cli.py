"""Command-line front end: train, eval, analyze, gradcheck, sweep.

Exit status is 0 only when every requested output was written. Config
problems exit with 2, checkpoint integrity problems with 3, a failed
gradient check with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from satlab import analysis
from satlab.autodiff import cross_entropy_mean, grad_check
from satlab.checkpoint import CheckpointIntegrityError, read_checkpoint
from satlab.config import ConfigError, ExperimentConfig, ModelConfig, load_experiment
from satlab.data import CorpusError, eval_windows_from_path
from satlab.model import build_model, forward
from satlab.training import CHECKPOINT_NAME, evaluate_perplexity, train

OUTPUT_ROOT_ENV = "SATLAB_OUTPUT_ROOT"
GRADCHECK_TOL = 1e-4
GRADCHECK_EPS = 1e-5
GRADCHECK_SAMPLE = 200

log = logging.getLogger("satlab")


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def run_dir(exp: ExperimentConfig, out: Optional[str]) -> Path:
    """``--out`` wins; otherwise ``$SATLAB_OUTPUT_ROOT`` (or the config's output_dir) / run_name."""
    if out:
        return Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV) or exp.output_dir
    return Path(root) / exp.run_name


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path) -> ExperimentConfig:
    try:
        return load_experiment(path)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None


def cmd_train(args) -> int:
    exp = _load(args.config)
    dest = run_dir(exp, args.out)
    _write_json(dest / "resolved_config.json", exp.to_dict())
    ckpt = dest / CHECKPOINT_NAME
    resume = ckpt if args.resume and ckpt.exists() else None
    result = train(exp.model, exp.train, out_dir=dest, resume=resume)
    final = result.metrics.final_val_loss
    print(f"trained {exp.model.variant} for {result.state.step} steps; final val loss {final:.6f}")
    print(f"outputs in {dest}")
    return 0


def _eval_inputs(args):
    ckpt = read_checkpoint(args.checkpoint)
    tcfg = ckpt.train_config
    if tcfg is None:
        raise CliError(f"{args.checkpoint}: no training config stored; cannot derive evaluation windows")
    windows = eval_windows_from_path(args.data, tcfg.seq_len, tcfg.val_fraction, tcfg.eval_windows,
                                     ckpt.weights.config.vocab_size)
    return ckpt, windows


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path(args.checkpoint).parent


def cmd_eval(args) -> int:
    ckpt, windows = _eval_inputs(args)
    res = evaluate_perplexity(ckpt.weights, windows, ckpt.train_config.batch_size)
    report = {"checkpoint": str(args.checkpoint), "data": str(args.data), "step": ckpt.step,
              "loss": res.loss, "perplexity": res.perplexity, "n_tokens": res.n_tokens}
    _write_json(_out_dir(args) / "eval.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    ckpt, windows = _eval_inputs(args)
    weights, bs = ckpt.weights, ckpt.train_config.batch_size
    out = _out_dir(args)
    if args.which in ("gates", "intervene") and weights.config.variant != "satformer":
        raise CliError(f"--which {args.which} needs a satformer checkpoint, "
                       f"got {weights.config.variant!r}")
    if args.which == "gates":
        stats = analysis.collect_gate_stats(weights, windows, bs)
        paths = stats.write(out)
        for layer, sp, cv, row in zip(stats.layers, stats.sparsity, stats.head_cv, stats.mean_alpha):
            print(f"layer {layer}: mean {row.mean():.4f} sparsity {sp:.4f} head_cv {cv:.4f}")
    elif args.which == "intervene":
        report = analysis.intervention_report(weights, windows, per_head=args.per_head, batch_size=bs)
        paths = report.write(out)
        for r in report.rows:
            print(f"layer {r.layer}: zero {r.zero_delta:+.4f} mean {r.mean_delta:+.4f}")
    else:
        reports = [analysis.logit_lens(weights, windows, bs, label=weights.config.variant)]
        if args.compare:
            other = read_checkpoint(args.compare)
            label = other.weights.config.variant
            if label == reports[0].label:
                label += "_compare"
            reports.append(analysis.logit_lens(other.weights, windows, bs, label=label))
        paths = analysis.write_lens(reports, out)
        for rep in reports:
            print(rep.label, " ".join(f"{p:.2f}" for p in rep.perplexities))
    for p in paths:
        print(f"wrote {p}")
    return 0


def model_gradcheck(model_cfg: ModelConfig, sample: int = GRADCHECK_SAMPLE, seed: int = 0,
                    eps: float = GRADCHECK_EPS, batch: int = 2, seq_len: int = 8):
    """Finite-difference check of the full model's loss gradient in float64.

    Every gate-projection coordinate is always checked; every other
    parameter contributes at least one coordinate.
    """
    weights = build_model(model_cfg, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    tokens = rng.integers(0, model_cfg.vocab_size, size=(batch, min(seq_len, model_cfg.max_seq_len) + 1))
    params = weights.named_parameters()
    required = [n for n in params if n.endswith(".w_alpha")]

    def loss_fn(_):
        return cross_entropy_mean(forward(weights, tokens[:, :-1]), tokens[:, 1:])

    return grad_check(loss_fn, params, eps=eps, sample=sample, seed=seed, required=required)


def cmd_gradcheck(args) -> int:
    exp = _load(args.config)
    if exp.train.dtype != "float64":
        raise CliError("gradcheck needs train.dtype = \"float64\" in the config")
    report = model_gradcheck(exp.model, sample=args.sample, seed=exp.train.seed)
    for name, err in sorted(report.per_param.items()):
        print(f"{name:24s} {err:.3e}")
    ok = report.passed(GRADCHECK_TOL)
    name, idx = report.worst_coordinate
    print(f"checked {report.n_checked} coordinates; max rel err {report.max_rel_err:.3e} "
          f"at {name}[{idx}]; {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    exp = _load(args.config)
    if exp.sweep is None:
        raise CliError("sweep needs a 'sweep' section listing gates and seeds")
    dest = run_dir(exp, args.out)
    _write_json(dest / "resolved_config.json", exp.to_dict())
    result = analysis.ablation_sweep(exp.model, exp.train, exp.sweep.gates, exp.sweep.seeds, dest)
    for r in result.summary():
        print(f"{r['rank']}. {r['gate']:16s} val {r['final_val_loss']:.4f} train {r['final_train_loss']:.4f}")
    print(f"outputs in {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a JSON experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="run directory (default: output root / run_name)")
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a data file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="gate statistics, gate interventions or logit lens")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--which", required=True, choices=("gates", "intervene", "lens"))
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.add_argument("--per-head", action="store_true", help="mean intervention uses one mean per KV head")
    p.add_argument("--compare", help="second checkpoint for paired logit-lens curves")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--config", required=True)
    p.add_argument("--sample", type=int, default=GRADCHECK_SAMPLE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train one satformer per gate function and seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="sweep directory (default: output root / run_name)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except CheckpointIntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except (CliError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", 2)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
