"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Failures print a single JSON line on stderr.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .. import realbench as rb
from ..errors import ConfigError, TrainingAbort
from ..flowgen import dump_window_steps, sample_ode_batch, sample_sde_window
from ..numkit import Rng
from ..promptpolicy import T_GEN, PromptTrajectory, rollout_tokens
from ..rewardcore import score_batch
from ..synthworld import PromptSeq, Sample, user_prompt, user_prompt_tokens
from . import pipeline
from .config import load_config
from .report import build_report
from .runs import RunDir, load_checkpoint

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", f"{self.prog}: {message}", EXIT_USAGE)


def _fail(kind, message, code, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    raise SystemExit(code)


def _parse_value(text):
    try:
        from .config import tomllib

        return tomllib.loads(f"v = {text}")["v"]
    except Exception:  # noqa: BLE001 - anything unparsable is taken as a bare string
        return text


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _config(args):
    ov = _overrides(args.set)
    if args.out:
        ov["out_dir"] = args.out
    return load_config(args.config, ov)


def _progress(args):
    if args.quiet:
        return None
    return lambda *rec: print(json.dumps(rec[0] if len(rec) == 1 else {"epoch": rec[0], "loss": rec[1]}), file=sys.stderr)


def _with_run(fn):
    def run(args):
        cfg = _config(args)
        with RunDir(cfg.out_dir) as rd:
            try:
                return fn(cfg, rd, args)
            except TrainingAbort as exc:
                path = rd.file("diagnostics.json")
                with open(path, "w") as fh:
                    json.dump({"message": str(exc), "diagnostics": exc.diagnostics}, fh, indent=2, sort_keys=True, default=str)
                _fail("numeric", str(exc), EXIT_NUMERIC, diagnostics=str(path))
    return run


@_with_run
def cmd_pretrain(cfg, rd, args):
    pipeline.pretrain_generator(cfg, rd, log=_progress(args))


@_with_run
def cmd_detectors(cfg, rd, args):
    pipeline.train_detector_suite(cfg, rd)


@_with_run
def cmd_sft(cfg, rd, args):
    pipeline.sft_prompt_policy(cfg, rd)


@_with_run
def cmd_stage1(cfg, rd, args):
    pipeline.grpo_stage1(cfg, rd, log=_progress(args))


@_with_run
def cmd_stage2(cfg, rd, args):
    pipeline.grpo_stage2(cfg, rd, log=_progress(args))


@_with_run
def cmd_arena(cfg, rd, args):
    extra = []
    for item in args.entry or []:
        if "=" not in item:
            raise ConfigError(f"--entry expects NAME=CHECKPOINT, got {item!r}")
        name, path = item.split("=", 1)
        extra.append((name, Path(path)))
    pipeline.arena(cfg, rd, extra=extra)
    with open(rd.file("bench/leaderboard.csv")) as fh:
        sys.stdout.write(fh.read())


@_with_run
def cmd_ablate(cfg, rd, args):
    if args.preset == "reward-swap":
        seeds = tuple(int(s) for s in args.seeds.split(","))
        rows = pipeline.ablate_reward_swap(cfg, rd, seeds, log=_progress(args))
    else:
        rows = pipeline.ablate_stage_wise(cfg, rd)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


@_with_run
def cmd_pipeline(cfg, rd, args):
    log = _progress(args)
    pipeline.pretrain_generator(cfg, rd, log=log)
    pipeline.train_detector_suite(cfg, rd)
    pipeline.sft_prompt_policy(cfg, rd)
    pipeline.grpo_stage1(cfg, rd, log=log)
    pipeline.grpo_stage2(cfg, rd, log=log)
    pipeline.arena(cfg, rd)


def cmd_sample(args):
    flow = load_checkpoint(args.checkpoint, "flow_model")
    world = flow.world
    prompt = user_prompt(world, args.cls)
    if args.n < 1:
        raise ConfigError("-n must be >= 1")
    rng = Rng(args.seed).child("sample")
    classes = np.full(args.n, args.cls)
    tokens = user_prompt_tokens(world, classes)
    if args.dump_prompts and not args.policy:
        raise ConfigError("--dump-prompts needs --policy")
    if args.policy:
        policy = load_checkpoint(args.policy, "prompt_policy")
        u = np.stack([rng.child("rewrite", i).uniform(size=T_GEN) for i in range(args.n)])
        tokens, logps, forced = rollout_tokens(policy, classes, u)
        if args.dump_prompts:
            with open(args.dump_prompts, "w") as fh:
                for i in range(args.n):
                    traj = PromptTrajectory(prompt, tokens[i], logps[i], forced[i])
                    fh.write(json.dumps(traj.to_json(flow.vocab)) + "\n")
    x_T = np.concatenate([rng.child(i).child("x_T").normal(size=(1, world.dim)) for i in range(args.n)])
    x = sample_ode_batch(flow, tokens, x_T)
    if args.dump_window:
        cond = PromptSeq(tuple(tokens[0]), prompt.user_class)
        start = flow.num_steps - 1 if args.window_start is None else args.window_start
        records = sample_sde_window(flow, cond, start, args.window_len, max(args.n, 2), rng.child("sde"))
        dump_window_steps(records, args.dump_window, str(args.checkpoint))
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for i in range(args.n):
            cond = PromptSeq(tuple(tokens[i]), prompt.user_class)
            out.write(json.dumps(Sample(x[i], cond, "generated").to_json(flow.vocab)) + "\n")
    finally:
        if args.output:
            out.close()


def _read_samples(path):
    xs, classes = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                xs.append([float(v) for v in rec["x"]])
                classes.append(int(rec["class"]) if "class" in rec else int(rec["tokens"][0]))
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise ConfigError(f"{path}:{n}: bad sample record ({exc})") from None
    if not xs:
        raise ConfigError(f"{path} holds no samples")
    return np.array(xs), np.array(classes)


def cmd_score(args):
    suite = load_checkpoint(args.checkpoint, "detector_suite")
    x, classes = _read_samples(args.input)
    if x.shape[1] != suite.world.dim:
        raise ConfigError(f"samples have dimension {x.shape[1]}, detectors expect {suite.world.dim}")
    if classes.min() < 0 or classes.max() >= suite.world.num_classes:
        raise ConfigError("sample class outside the world's classes")
    r = score_batch(x, classes, suite)
    held = suite.heldout.prob_real(x)
    for i in range(len(x)):
        print(json.dumps({"index": i, "class": int(classes[i]), "r_sem": r[i, 0], "r_feat": r[i, 1],
                          "r_align": r[i, 2], "heldout_p_real": float(held[i])}))
    if args.explain:
        # long format: one (statistic, contribution) row per sample and statistic; the
        # contributions plus the bias row sum to the fake-minus-real logit gap
        contrib = suite.semantic.report(x)
        with open(args.explain, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "statistic", "contribution"])
            for i in range(len(x)):
                for name, c in zip(suite.semantic.stat_names, contrib[i]):
                    w.writerow([i, name, repr(float(c))])
                w.writerow([i, "bias", repr(float(suite.semantic.bias_gap()))])


def cmd_report(args):
    summary = build_report(args.runs, args.output)
    print(json.dumps({"files": len(summary["files"]), "gaps": summary["gaps"]}))


def build_parser():
    p = _Parser(prog="detgen", description="Detector-guided post-training on a toy world.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def run_cmd(name, fn, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="TOML config (defaults if omitted)")
        s.add_argument("--out", help="run directory (overrides out_dir)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. stage2.steps=50")
        s.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
        s.set_defaults(func=fn)
        return s

    run_cmd("pretrain-generator", cmd_pretrain, "flow-matching cold start")
    run_cmd("train-detectors", cmd_detectors, "fit and freeze the detector suite")
    run_cmd("sft-policy", cmd_sft, "supervised cold start for the prompt policy")
    run_cmd("grpo-stage1", cmd_stage1, "optimize the prompt policy")
    run_cmd("grpo-stage2", cmd_stage2, "optimize the generator")
    a = run_cmd("arena", cmd_arena, "detector scoring and judged battles")
    a.add_argument("--entry", action="append", metavar="NAME=CHECKPOINT", help="extra generator entry")
    ab = run_cmd("ablate", cmd_ablate, "ablation presets")
    ab.add_argument("--preset", required=True, choices=("reward-swap", "stage-wise"))
    ab.add_argument("--seeds", default="0,1,2", help="comma-separated stage-2 seeds (reward-swap)")
    run_cmd("pipeline", cmd_pipeline, "all phases in order")

    s = sub.add_parser("sample", help="draw samples from a generator checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("-n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--policy", help="prompt-policy checkpoint used to rewrite the prompt")
    s.add_argument("--output", help="write JSONL here instead of stdout")
    s.add_argument("--dump-prompts", metavar="PATH", help="debug: write the rewritten prompts with their log-probs")
    s.add_argument("--dump-window", metavar="PATH", help="debug: write SDE window steps for the first prompt")
    s.add_argument("--window-start", type=int, help="window start step for --dump-window (default T-1)")
    s.add_argument("--window-len", type=int, default=5, help="window length for --dump-window")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("score", help="score samples with a detector suite")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="samples JSONL (x and class or tokens)")
    s.add_argument("--explain", help="write per-statistic semantic contributions to this CSV")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("report", help="CSV and SVG report over run directories")
    s.add_argument("runs", nargs="*")
    s.add_argument("--output", default="report")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        _fail("config", str(exc), EXIT_USAGE)
    except TrainingAbort as exc:
        _fail("numeric", str(exc), EXIT_NUMERIC)
    return 0


if __name__ == "__main__":
    sys.exit(main())
