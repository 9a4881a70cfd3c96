"""
Pipeline Orchestrator
Runs the stages in order, persisting every intermediate to the output directory

    build → sample → train-sae → keywords → recall → rank → select
          → train-router → correct → report

Each stage reads its inputs from memory when the previous stage ran in the
same process, otherwise from disk, so any stage can be rerun on its own once
its inputs exist. Persisted tensors are float32; in-memory values are rounded
through float32 as well, so a resumed run matches an uninterrupted one.
"""

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from backend.config import RunConfig
from backend.correct import (
    ORACLE_ROUTER,
    OracleRouter,
    TRAINED_ROUTER,
    build_pool,
    build_router_pairs,
    correction_rate,
    make_problem_set,
    routing_accuracy,
    run_arms,
)
from backend.dump import dump_tensors, load_tensors
from backend.errors import SaeSteeringError, StageError
from backend.identify import (
    CandidateSet,
    EffectivenessReport,
    KeywordTable,
    Selection,
    baseline_continuations,
    curate_keywords,
    evaluate_vector,
    extract_keywords,
    group_segments,
    judge_continuations,
    logit_contribution_matrix,
    rank_stage2,
    reason_score,
    recall_by_reason_score,
    recall_precision,
    recall_stage1,
    select_top,
)
from backend.judge import JudgePanel, KeywordJudge
from backend.numerics import derive_seed, quantize
from backend.report import RunReport, emit_report
from backend.router import RouterParams, train_router
from backend.sae import SaeParams, match_directions, train_sae
from backend.steering import RepetitionRule, logit_boost_generate
from backend.toylm import (
    LabeledActivationSet,
    ToyLM,
    Trajectory,
    alternating_schedule,
    build_toylm,
    planted_directions,
    sample_prefixes,
    sample_strategy_corpus,
)

logger = logging.getLogger(__name__)

STAGES = (
    "build", "sample", "train-sae", "keywords", "recall", "rank",
    "select", "train-router", "correct", "report",
)

# seed streams, one per consumer of randomness
STREAM_TOYLM = 0
STREAM_CORPUS = 1
STREAM_SAE = 2
STREAM_VALIDATION = 3
STREAM_ROUTER_PROBLEMS = 4
STREAM_ROUTER_EVAL = 5
STREAM_CORRECT = 6
STREAM_ROUTER_INIT = 7

MANIFEST = "manifest.json"
LOCK_FILE = ".lock"


def config_fingerprint(config: RunConfig) -> str:
    payload = json.dumps(config.to_dict(include_output=False), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@contextmanager
def output_lock(output_dir: str):
    """Exclusive ownership of the output directory for the duration of a run"""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("lock", f"{path} exists; another run owns this directory")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        os.remove(path)


def _quantized_params(tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: quantize(t) for name, t in tensors.items()}


class Pipeline:
    """Stage runner bound to one config and output directory"""

    def __init__(self, config: RunConfig, progress: bool = False):
        self.config = config.validate()
        self.output_dir = config.output_dir
        self.progress = progress
        self.timings: Dict[str, float] = {}
        self._cache: Dict[str, Any] = {}
        self._stage_fns: Dict[str, Callable[[], None]] = {
            "build": self.build,
            "sample": self.sample,
            "train-sae": self.train_sae,
            "keywords": self.keywords,
            "recall": self.recall,
            "rank": self.rank,
            "select": self.select,
            "train-router": self.train_router,
            "correct": self.correct,
            "report": self.report,
        }

    # -- persistence -------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_json(self, name: str, data: Any):
        os.makedirs(self.output_dir, exist_ok=True)
        with open(self.path(name), "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")

    def read_json(self, name: str, stage: str) -> Any:
        if not os.path.exists(self.path(name)):
            raise StageError(stage, f"missing {name}; run the '{stage}' stage first")
        with open(self.path(name), "r", encoding="utf-8") as f:
            return json.load(f)

    def read_tensors(self, name: str, stage: str) -> Dict[str, np.ndarray]:
        if not os.path.exists(self.path(name)):
            raise StageError(stage, f"missing {name}; run the '{stage}' stage first")
        return load_tensors(self.path(name))

    def manifest(self) -> Dict[str, Any]:
        if not os.path.exists(self.path(MANIFEST)):
            return {"config": config_fingerprint(self.config), "completed": []}
        with open(self.path(MANIFEST), "r", encoding="utf-8") as f:
            data = json.load(f)
        if data.get("config") != config_fingerprint(self.config):
            logger.warning("output directory holds a run with a different config; starting over")
            return {"config": config_fingerprint(self.config), "completed": []}
        return data

    def mark_done(self, stage: str):
        data = self.manifest()
        if stage not in data["completed"]:
            data["completed"].append(stage)
        data["seed"] = self.config.seed
        self.write_json(MANIFEST, data)

    # -- shared inputs -----------------------------------------------------

    def seed(self, stream: int) -> int:
        return derive_seed(self.config.seed, stream)

    def lm(self) -> ToyLM:
        if "lm" not in self._cache:
            t = self.config.toylm
            self._cache["lm"] = build_toylm(
                n_dim=t.n_dim, vocab=t.vocab, n_strategies=t.n_strategies,
                keyword_count_per_strategy=t.keyword_count, keyword_gain=t.keyword_gain,
                leak=t.leak, noise_sigma=t.noise_sigma, seed=self.seed(STREAM_TOYLM),
                mix_scale=t.mix_scale, position_scale=t.position_scale,
                filler_scale=t.filler_scale, keyword_base_scale=t.keyword_base_scale,
            )
        return self._cache["lm"]

    def judge(self):
        thresholds = self.config.judge.panel_thresholds()
        if len(thresholds) > 1:
            return JudgePanel.from_thresholds(thresholds)
        return KeywordJudge(self.config.judge.m_min)

    def rule(self) -> RepetitionRule:
        return RepetitionRule(self.config.steering.min_gram, self.config.steering.min_repeats)

    def validation(self) -> List[Trajectory]:
        if "validation" not in self._cache:
            i = self.config.identify
            self._cache["validation"] = sample_prefixes(
                self.lm(), i.validation_size, i.prefix_length, self.seed(STREAM_VALIDATION)
            )
        return self._cache["validation"]

    def corpus(self):
        if "corpus" not in self._cache:
            tensors = self.read_tensors("corpus.saes", "sample")
            meta = self.read_json("corpus.json", "sample")
            data = LabeledActivationSet(
                activations=tensors["activations"],
                labels=meta["labels"],
                tokens=meta["tokens"],
                source_seed=meta["source_seed"],
            )
            self._cache["corpus"] = (data, [(label, tokens) for label, tokens in meta["segments"]])
        return self._cache["corpus"]

    def sae(self) -> SaeParams:
        if "sae" not in self._cache:
            meta = self.read_json("sae.json", "train-sae")
            self._cache["sae"] = SaeParams.from_dict(self.read_tensors("sae.saes", "train-sae"), meta["k"])
        return self._cache["sae"]

    def keyword_table(self) -> KeywordTable:
        if "keywords" not in self._cache:
            data = self.read_json("keywords.json", "keywords")
            self._cache["keywords"] = KeywordTable.from_dict(data["used"])
        return self._cache["keywords"]

    def candidates(self) -> Dict[str, CandidateSet]:
        if "candidates" not in self._cache:
            data = self.read_json("candidates.json", "recall")
            self._cache["candidates"] = {name: CandidateSet.from_dict(c) for name, c in data.items()}
        return self._cache["candidates"]

    def effectiveness(self) -> EffectivenessReport:
        if "effectiveness" not in self._cache:
            data = self.read_json("effectiveness.json", "rank")
            self._cache["effectiveness"] = EffectivenessReport.from_dict(data["stage1"])
        return self._cache["effectiveness"]

    def selection(self) -> Dict[str, Selection]:
        if "selection" not in self._cache:
            report = self.effectiveness()
            i = self.config.identify
            self._cache["selection"] = {
                "main": select_top(report, i.per_strategy),
                "pool": select_top(report, i.pool_per_strategy),
            }
        return self._cache["selection"]

    def router(self) -> RouterParams:
        if "router" not in self._cache:
            self._cache["router"] = RouterParams.from_dict(self.read_tensors("router.saes", "train-router"))
        return self._cache["router"]

    # -- stages --------------------------------------------------------------

    def build(self):
        lm = self.lm()
        self.write_json("toylm.json", {
            "n_dim": lm.n_dim,
            "vocab": lm.vocab,
            "transition_norm": lm.transition_norm,
            "hook_point": lm.hook_point,
            "strategies": [
                {"id": s.id, "name": s.name, "keywords": list(s.keywords), "answer_token": s.answer_token}
                for s in lm.strategies
            ],
        })
        with open(self.path("config.ini"), "w", encoding="utf-8") as f:
            f.write(self.config.to_ini())

    def sample(self):
        c = self.config.corpus
        schedule = alternating_schedule(self.config.toylm.n_strategies, c.rounds, c.run_length)
        data, segments = sample_strategy_corpus(
            self.lm(), schedule, self.seed(STREAM_CORPUS),
            temperature=c.temperature, amplitude_range=(c.amplitude_min, c.amplitude_max),
        )
        data.activations = quantize(data.activations)
        dump_tensors(self.path("corpus.saes"), {"activations": data.activations})
        self.write_json("corpus.json", {
            "labels": data.labels,
            "tokens": data.tokens,
            "source_seed": data.source_seed,
            "segments": [[label, tokens] for label, tokens in segments],
        })
        self._cache["corpus"] = (data, segments)

    def train_sae(self):
        data, _ = self.corpus()
        train_config = replace(self.config.sae_train_config(), seed=self.seed(STREAM_SAE))
        params, log = train_sae(data, train_config, progress=self.progress)
        params = SaeParams.from_dict(_quantized_params(params.as_dict()), params.k)
        dump_tensors(self.path("sae.saes"), params.as_dict())
        recovery = match_directions(params, planted_directions(self.lm()))
        self.write_json("sae.json", {
            "k": params.k,
            "m_dim": params.m_dim,
            "steps": len(log.losses),
            "initial_loss": log.initial_loss,
            "final_loss": log.final_loss,
            "dead_counts": log.dead_counts,
            "recovery": [{"feature_id": i, "cosine": cos} for i, cos in recovery],
        })
        self._cache["sae"] = params

    def keywords(self):
        lm = self.lm()
        _, segments = self.corpus()
        corpus = group_segments(segments, lm.n_strategies)
        extracted = extract_keywords(corpus, self.config.identify.top_n, stop_tokens=lm.control_tokens)
        used = curate_keywords(extracted, lm.strategies) if self.config.identify.curate else extracted
        self.write_json("keywords.json", {"extracted": extracted.to_dict(), "used": used.to_dict()})
        self._cache["keywords"] = used

    def recall(self):
        i = self.config.identify
        lm = self.lm()
        sae = self.sae()
        contributions = logit_contribution_matrix(sae.w_dec, lm.unembed)
        keywords = self.keyword_table()
        stage1 = recall_stage1(contributions, keywords, i.n, i.tau, i.top_m)
        sets = {"stage1": stage1}
        if i.reason_score_baseline:
            data, _ = self.corpus()
            scores = reason_score(sae, data.activations, data.tokens, lm.strategies)
            sets["reason_score"] = recall_by_reason_score(scores, stage1.counts(), contributions, keywords, i.top_m)
        self.write_json("candidates.json", {name: c.to_dict() for name, c in sets.items()})
        self._cache["candidates"] = sets

    def rank(self):
        i = self.config.identify
        st = self.config.steering
        lm = self.lm()
        sae = self.sae()
        sets = self.candidates()
        if self.read_json("sae.json", "train-sae")["steps"] == 0:
            raise StageError("rank", "no recovered features: the SAE took no training steps, its decoder is random")
        if sets["stage1"].is_empty():
            raise StageError("rank", "no recovered features: stage 1 recalled no candidate for any strategy")

        validation = self.validation()
        judge = self.judge()
        ranked = {
            name: rank_stage2(c, sae, lm, validation, judge, i.horizon, st.alpha_start, self.rule())
            for name, c in sets.items() if not c.is_empty()
        }

        baselines = baseline_continuations(lm, validation, i.horizon)
        zero = np.zeros(lm.n_dim)
        zero_control = {}
        logit_boost = {}
        for spec in lm.strategies:
            judgments = evaluate_vector(lm, zero, st.alpha_start, validation, baselines, spec, judge, i.horizon)
            zero_control[str(spec.id)] = float(np.mean([j.value for j in judgments]))
            boosted = [
                logit_boost_generate(lm, prefix, spec, st.logit_boost_beta, i.horizon) for prefix in validation
            ]
            judgments = judge_continuations(baselines, boosted, spec, judge)
            logit_boost[str(spec.id)] = float(np.mean([j.value for j in judgments]))

        precision = {}
        for name, report in ranked.items():
            p = recall_precision(report, i.precision_threshold)
            precision[name] = {"overall": p.overall, "per_strategy": {str(s): v for s, v in p.per_strategy.items()}}

        self.write_json("effectiveness.json", {
            **{name: report.to_dict() for name, report in ranked.items()},
            "zero_control": zero_control,
            "logit_boost": logit_boost,
            "precision": precision,
        })
        self._cache["effectiveness"] = ranked["stage1"]

        if not any(e.success_rate > 0 for e in ranked["stage1"].entries()):
            raise StageError("rank", "no recovered features: no candidate steers its strategy on any prefix")

    def select(self):
        selections = self.selection()
        self.write_json("selection.json", {
            name: {
                "shortfall": sel.shortfall,
                "chosen": {
                    str(s): [
                        {"feature_id": e.feature_id, "alpha": e.alpha, "success_rate": e.success_rate}
                        for e in entries
                    ]
                    for s, entries in sorted(sel.chosen.items())
                },
            }
            for name, sel in selections.items()
        })

    def pool(self):
        return build_pool(self.selection()["pool"], self.sae())

    def train_router(self):
        lm = self.lm()
        r = self.config.router
        co = self.config.correct
        pool = self.pool()
        problems = make_problem_set(
            lm, r.train_problems, self.seed(STREAM_ROUTER_PROBLEMS),
            co.prefix_length, co.problem_alpha, co.cue_amplitude,
        )
        pairs = build_router_pairs(lm, problems, pool, co.horizon)
        if not pairs:
            raise StageError("train-router", "no training pair has both a correcting and a failing feature")
        train_config = replace(self.config.router_train_config(), seed=self.seed(STREAM_ROUTER_INIT))
        router, log = train_router(pairs, train_config, progress=self.progress)
        router = RouterParams.from_dict(_quantized_params(router.as_dict()))
        dump_tensors(self.path("router.saes"), router.as_dict())

        held_out = make_problem_set(
            lm, r.eval_problems, self.seed(STREAM_ROUTER_EVAL),
            co.prefix_length, co.problem_alpha, co.cue_amplitude,
        )
        self.write_json("router.json", {
            "pairs": len(pairs),
            "initial_loss": log.initial_loss,
            "final_loss": log.final_loss,
            "accuracy": {
                TRAINED_ROUTER: routing_accuracy(router, held_out, pool),
                ORACLE_ROUTER: routing_accuracy(OracleRouter(), held_out, pool),
            },
        })
        self._cache["router"] = router

    def correct(self):
        lm = self.lm()
        co = self.config.correct
        problems = make_problem_set(
            lm, co.problems, self.seed(STREAM_CORRECT),
            co.prefix_length, co.problem_alpha, co.cue_amplitude,
        )
        results = run_arms(lm, problems, self.pool(), self.router(), co.horizon)
        rates = correction_rate(results)
        self.write_json("correction.json", {
            "problems": len(problems),
            "horizon": co.horizon,
            "rates": rates,
            "corrected": {m: sum(1 for r in results if r.method == m and r.corrected) for m in rates},
        })

    def report(self) -> RunReport:
        lm = self.lm()
        effectiveness = self.read_json("effectiveness.json", "rank")
        candidates = self.read_json("candidates.json", "recall")
        selection = self.read_json("selection.json", "select")
        router = self.read_json("router.json", "train-router")
        correction = self.read_json("correction.json", "correct")
        sae = self.read_json("sae.json", "train-sae")

        report = RunReport(
            seed=self.config.seed,
            config=self.config.to_dict(include_output=False),
            strategy_names={str(s.id): s.name for s in lm.strategies},
            timings=dict(self.timings),
            sae={key: sae[key] for key in ("initial_loss", "final_loss", "dead_counts", "recovery", "steps")},
            recall={
                name: {"recall_fraction": c["recall_fraction"], "total_features": c["total_features"],
                       "counts": {s: len(v) for s, v in c["per_strategy"].items()}}
                for name, c in candidates.items()
            },
            effectiveness=effectiveness["stage1"],
            selected=selection["main"]["chosen"],
            baselines={
                "zero_control": effectiveness["zero_control"],
                "logit_boost": effectiveness["logit_boost"],
                "precision": effectiveness["precision"],
            },
            routing=router,
            correction=correction,
        )
        emit_report(report, self.output_dir)
        self._cache["report"] = report
        return report

    # -- driver --------------------------------------------------------------

    def run_stage(self, stage: str):
        if stage not in self._stage_fns:
            raise StageError(stage, f"unknown stage; expected one of {STAGES}")
        logger.info("stage %s: start", stage)
        started = time.perf_counter()
        try:
            self._stage_fns[stage]()
        except StageError:
            logger.error("stage %s failed", stage)
            raise
        except (SaeSteeringError, OSError, ValueError) as e:
            logger.error("stage %s failed: %s", stage, e)
            raise StageError(stage, str(e), e) from e
        self.timings[stage] = time.perf_counter() - started
        logger.info("stage %s: done in %.2fs", stage, self.timings[stage])
        if stage != "report":
            self.mark_done(stage)

    def run(self, stages: Optional[Sequence[str]] = None, resume: bool = False) -> Optional[RunReport]:
        """
        Run stages (all by default) under the output lock

        With resume, stages already completed under the same config are
        skipped. Returns the report when the report stage ran.
        """
        stages = list(stages or STAGES)
        completed = set(self.manifest()["completed"]) if resume else set()
        with output_lock(self.output_dir):
            for stage in stages:
                if stage in completed and stage != "report":
                    logger.info("stage %s: already complete, skipped", stage)
                    continue
                self.run_stage(stage)
        return self._cache.get("report")


def run_pipeline(config: RunConfig, resume: bool = False, progress: bool = False) -> RunReport:
    """Full run: every stage, then the report"""
    return Pipeline(config, progress=progress).run(resume=resume)
