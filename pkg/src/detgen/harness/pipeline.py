"""The workflow phases. Each reads its inputs from the run directory and
writes checkpoints/metrics back, recording hashes in the manifest."""
import csv
import time

import numpy as np

from .. import realbench as rb
from ..detectors import train_detectors
from ..errors import ConfigError
from ..flowgen import FlowModel, fm_pretrain, sample_ode_batch
from ..grpo import REWARD_PRESETS, GrpoConfig, Stage1Trainer, Stage2Trainer
from ..promptpolicy import PromptPolicy, make_template_corpus, sft_policy
from ..synthworld import SampleBatch, sample_real_batch, user_prompt_tokens
from .config import save_config
from .runs import load_checkpoint, save_checkpoint, write_jsonl

GENERATOR = "generator.json"
DETECTORS = "detectors.json"
POLICY_SFT = "policy_sft.json"
POLICY_STAGE1 = "policy_stage1.json"
GENERATOR_STAGE2 = "generator_stage2.json"
METRICS = {"pretrain": "metrics_pretrain.jsonl", "sft": "metrics_sft.jsonl",
           "stage1": "metrics_stage1.jsonl", "stage2": "metrics_stage2.jsonl"}
PHASES = ("pretrain-generator", "train-detectors", "sft-policy", "grpo-stage1", "grpo-stage2", "arena")


def _phase(name):
    def wrap(fn):
        def run_phase(cfg, run, **kw):
            t0 = time.perf_counter()
            save_config(cfg, run.file("config.toml"))
            outputs = fn(cfg, run, **kw)
            run.record_phase(name, ["config.toml", *outputs], time.perf_counter() - t0, cfg.digest())
            return outputs
        run_phase.__name__ = fn.__name__
        run_phase.__doc__ = fn.__doc__
        return run_phase
    return wrap


@_phase("pretrain-generator")
def pretrain_generator(cfg, run, log=None):
    g = cfg.generator
    data = sample_real_batch(cfg.world, g.n_train, cfg.stream("world").child("pretrain"))
    rng = cfg.stream("pretrain")
    model = FlowModel.init(cfg.world, rng.child("init"), hidden=g.hidden, num_steps=g.num_steps, eta=g.eta)
    curve = fm_pretrain(model, data, g.epochs, rng.child("fit"), g.batch_size, g.lr, g.caption_dropout, log)
    save_checkpoint(model, run.file(GENERATOR))
    write_jsonl(run.file(METRICS["pretrain"]), [{"phase": "pretrain", "epoch": e, "loss": v} for e, v in enumerate(curve)])
    return [GENERATOR, METRICS["pretrain"]]


def generated_for_detectors(cfg, model, rng):
    """Generated half of the detector corpus: captions, some cut back to the bare class token."""
    d = cfg.detectors
    ref = sample_real_batch(cfg.world, d.n_generated, rng.child("captions"))
    tokens = ref.tokens.copy()
    short = rng.child("route").uniform(size=len(ref)) < d.short_prompt_fraction
    tokens[short] = user_prompt_tokens(cfg.world, ref.classes[short])
    x = sample_ode_batch(model, tokens, rng.child("x_T").normal(size=(len(ref), cfg.world.dim)))
    return SampleBatch(x, tokens, ref.classes, "generated")


@_phase("train-detectors")
def train_detector_suite(cfg, run):
    model = load_checkpoint(run.require(GENERATOR, "pretrain-generator"), "flow_model")
    rng = cfg.stream("detectors")
    real = sample_real_batch(cfg.world, cfg.detectors.n_real, cfg.stream("world").child("detectors"))
    fake = generated_for_detectors(cfg, model, rng.child("generated"))
    suite = train_detectors(cfg.world, real, fake, cfg.detectors.train, rng.child("fit"))
    save_checkpoint(suite, run.file(DETECTORS))
    return [DETECTORS]


@_phase("sft-policy")
def sft_prompt_policy(cfg, run):
    p = cfg.policy
    rng = cfg.stream("sft")
    policy = PromptPolicy.init(cfg.world, rng.child("init"), p.emb_dim, p.hidden, p.temperature)
    corpus = make_template_corpus(cfg.world, p.sft_corpus, rng.child("corpus"))
    curve = sft_policy(policy, corpus, p.sft_epochs, rng.child("fit"), p.sft_lr, p.sft_batch_size)
    save_checkpoint(policy, run.file(POLICY_SFT))
    write_jsonl(run.file(METRICS["sft"]), [{"phase": "sft", "epoch": e, "loss": v} for e, v in enumerate(curve)])
    return [POLICY_SFT, METRICS["sft"]]


def _fresh(path):
    if path.exists():
        path.unlink()
    return path


@_phase("grpo-stage1")
def grpo_stage1(cfg, run, log=None):
    generator = load_checkpoint(run.require(GENERATOR, "pretrain-generator"), "flow_model")
    suite = load_checkpoint(run.require(DETECTORS, "train-detectors"), "detector_suite")
    policy = load_checkpoint(run.require(POLICY_SFT, "sft-policy"), "prompt_policy")
    rng = cfg.stream("stage1").child("seed", cfg.stage1.seed)
    trainer = Stage1Trainer(policy, generator, suite, cfg.stage1, rng)
    trainer.train(metrics_path=_fresh(run.file(METRICS["stage1"])), log=log)
    save_checkpoint(policy, run.file(POLICY_STAGE1))
    return [POLICY_STAGE1, METRICS["stage1"]]


def frozen_policy(run):
    name = POLICY_STAGE1 if run.file(POLICY_STAGE1).exists() else POLICY_SFT
    return load_checkpoint(run.require(name, "sft-policy"), "prompt_policy")


def stage2_train(cfg, run, gcfg, out_ckpt, out_metrics, log=None):
    """Train stage 2 from the cold-start generator with ``gcfg``; returns the tuned model."""
    if cfg.generator.eta <= 0:
        raise ConfigError("generator.eta must be > 0 for stage 2 (step ratios undefined at eta = 0)")
    flow = load_checkpoint(run.require(GENERATOR, "pretrain-generator"), "flow_model")
    flow.eta = cfg.generator.eta
    suite = load_checkpoint(run.require(DETECTORS, "train-detectors"), "detector_suite")
    policy = frozen_policy(run)
    rng = cfg.stream("stage2").child("seed", gcfg.seed)
    trainer = Stage2Trainer(flow, policy, suite, gcfg, rng)
    trainer.train(metrics_path=_fresh(out_metrics), log=log)
    save_checkpoint(flow, out_ckpt)
    return flow


@_phase("grpo-stage2")
def grpo_stage2(cfg, run, log=None):
    stage2_train(cfg, run, cfg.stage2, run.file(GENERATOR_STAGE2), run.file(METRICS["stage2"]), log)
    return [GENERATOR_STAGE2, METRICS["stage2"]]


def bench_entries(cfg, run, extra=None):
    """Real entry, the cold-start generator, and the stage-2 generator if present."""
    b = cfg.bench
    rng = cfg.stream("arena")
    policy = frozen_policy(run)
    entries = [rb.real_entry(cfg.world, b.n_per_class, cfg.stream("world").child("bench"))]
    models = [("sft", run.file(GENERATOR))]
    if run.file(GENERATOR_STAGE2).exists():
        models.append(("grpo", run.file(GENERATOR_STAGE2)))
    models += list(extra or [])
    for name, path in models:
        flow = load_checkpoint(path, "flow_model")
        # all model entries share prompts and starting noise so differences are paired
        entries.append(rb.model_entry(name, flow, b.n_per_class, rng.child("model_samples"), policy,
                                      b.rewrite_fraction, str(path)))
    return entries


@_phase("arena")
def arena(cfg, run, extra=None):
    suite = load_checkpoint(run.require(DETECTORS, "train-detectors"), "detector_suite")
    entries = bench_entries(cfg, run, extra)
    result = rb.run_arena(entries, rb.HeldoutJudge(suite.heldout), cfg.stream("arena").child("battles"),
                          cfg.bench.num_battles, cfg.bench.battles_per_pair)
    scores = {e.entry_id: rb.detector_scoring(e, suite) for e in entries}
    run.file("bench").mkdir(exist_ok=True)
    result.write_log(run.file("bench/battles.jsonl"))
    result.matrix.write_csv(run.file("bench/winmatrix.csv"))
    result.matrix.write_json(run.file("bench/winmatrix.json"))
    rb.write_leaderboard(run.file("bench/leaderboard.csv"), result.matrix, scores)
    with open(run.file("bench/detector_scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry", "semantic", "feature", "heldout", "heldout_reward_independent"])
        for e, s in scores.items():
            w.writerow([e, repr(s["semantic"]), repr(s["feature"]), repr(s["heldout"]), "yes"])
    with open(run.file("bench/summary.txt"), "w") as fh:
        fh.write(f"battles={len(result.battles)} judge_errors={result.judge_errors}\n")
    return ["bench/battles.jsonl", "bench/winmatrix.csv", "bench/winmatrix.json",
            "bench/leaderboard.csv", "bench/detector_scores.csv", "bench/summary.txt"]


def eval_heldout(cfg, suite, flow, policy):
    """Mean held-out P(real) and alignment reward on a fixed paired evaluation set."""
    b = cfg.bench
    rng = cfg.stream("arena").child("ablation_eval")
    k = np.repeat(np.arange(cfg.world.num_classes), b.n_per_class)
    tokens = rb.bench_tokens(cfg.world, k, rng.child("prompts"), policy, b.rewrite_fraction)
    x = sample_ode_batch(flow, tokens, rng.child("x_T").normal(size=(len(k), cfg.world.dim)))
    return float(suite.heldout.prob_real(x).mean()), float(suite.alignment.reward(x, k).mean())


def ablate_reward_swap(cfg, run, seeds=(0, 1, 2), presets=("detector", "alignment-only", "feature-only"), log=None):
    """Stage-2 runs per reward preset and seed; rows of held-out gain versus the cold start."""
    suite = load_checkpoint(run.require(DETECTORS, "train-detectors"), "detector_suite")
    policy = frozen_policy(run)
    base = load_checkpoint(run.require(GENERATOR, "pretrain-generator"), "flow_model")
    base_p, base_a = eval_heldout(cfg, suite, base, policy)
    rows = []
    out = run.file("ablate")
    out.mkdir(exist_ok=True)
    for preset in presets:
        for seed in seeds:
            g = GrpoConfig(**{**cfg.stage2.to_dict(), "reward_weights": REWARD_PRESETS[preset], "seed": seed})
            tag = f"{preset}_seed{seed}"
            flow = stage2_train(cfg, run, g, out / f"{tag}.json", out / f"{tag}.jsonl", log)
            p, a = eval_heldout(cfg, suite, flow, policy)
            rows.append({"preset": preset, "seed": seed, "heldout_preal": p, "heldout_gain": p - base_p,
                         "alignment": a, "alignment_drop": base_a - a})
    _write_rows(run.file("ablate/reward_swap.csv"), rows)
    return rows


def ablate_stage_wise(cfg, run):
    """Held-out P(real) for cold start, +stage 1 prompts, +stage 2 generator."""
    suite = load_checkpoint(run.require(DETECTORS, "train-detectors"), "detector_suite")
    base = load_checkpoint(run.require(GENERATOR, "pretrain-generator"), "flow_model")
    sft = load_checkpoint(run.require(POLICY_SFT, "sft-policy"), "prompt_policy")
    combos = [("baseline", base, None), ("sft_policy", base, sft)]
    if run.file(POLICY_STAGE1).exists():
        combos.append(("stage1", base, load_checkpoint(run.file(POLICY_STAGE1), "prompt_policy")))
    if run.file(GENERATOR_STAGE2).exists():
        combos.append(("stage1+stage2", load_checkpoint(run.file(GENERATOR_STAGE2), "flow_model"), frozen_policy(run)))
    rows = []
    for name, flow, policy in combos:
        b = cfg.bench
        rng = cfg.stream("arena").child("ablation_eval")
        k = np.repeat(np.arange(cfg.world.num_classes), b.n_per_class)
        tokens = rb.bench_tokens(cfg.world, k, rng.child("prompts"), policy, 1.0)
        x = sample_ode_batch(flow, tokens, rng.child("x_T").normal(size=(len(k), cfg.world.dim)))
        rows.append({"variant": name, "heldout_preal": float(suite.heldout.prob_real(x).mean()),
                     "semantic": float(suite.semantic.reward(x).mean()),
                     "feature": float(suite.feature.reward(x).mean()),
                     "alignment": float(suite.alignment.reward(x, k).mean())})
    run.file("ablate").mkdir(exist_ok=True)
    _write_rows(run.file("ablate/stage_wise.csv"), rows)
    return rows


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
