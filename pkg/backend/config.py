"""
Run Configuration
Every tunable of a pipeline run, loaded from an INI file and command-line overrides

    [sae]
    steps = 20000
    k = 8

Sections mirror the pipeline modules; [run] holds seed and output_dir.
Unknown sections and keys are rejected, and validate() reports every range
violation at once.
"""

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Iterable, List, Mapping

from backend.errors import ConfigError
from backend.router import RouterTrainConfig
from backend.sae import SaeTrainConfig

ENV_OUTPUT_ROOT = "SAE_STEERING_OUTPUT"
DEFAULT_OUTPUT_ROOT = "runs"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def default_output_dir() -> str:
    return os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT)


@dataclass
class ToyLMSection:
    n_dim: int = 64
    vocab: int = 96
    n_strategies: int = 5
    keyword_count: int = 5
    keyword_gain: float = 4.0
    leak: float = 0.8
    noise_sigma: float = 0.05
    mix_scale: float = 0.1
    position_scale: float = 0.5
    filler_scale: float = 2.0
    keyword_base_scale: float = 0.25


@dataclass
class CorpusSection:
    rounds: int = 40
    run_length: int = 64
    temperature: float = 1.0
    amplitude_min: float = 2.0
    amplitude_max: float = 6.0


@dataclass
class SaeSection:
    m_dim: int = 512
    k: int = 8
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    dead_feature_window: int = 1000
    init_sample_size: int = 1000


@dataclass
class IdentifySection:
    top_n: int = 20
    curate: bool = True
    n: int = 2
    tau: float = 0.1
    top_m: int = 10
    validation_size: int = 16
    prefix_length: int = 32
    horizon: int = 64
    per_strategy: int = 1
    pool_per_strategy: int = 3
    precision_threshold: float = 0.5
    reason_score_baseline: bool = True


@dataclass
class SteeringSection:
    alpha_start: float = 15.0
    min_gram: int = 3
    min_repeats: int = 3
    logit_boost_beta: float = 4.0


@dataclass
class JudgeSection:
    m_min: int = 3
    panel_m_min: str = "3"

    def panel_thresholds(self) -> List[int]:
        return [int(part) for part in self.panel_m_min.split(",") if part.strip()]


@dataclass
class RouterSection:
    hidden_dim: int = 64
    embed_dim: int = 32
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    train_problems: int = 300
    eval_problems: int = 200


@dataclass
class CorrectSection:
    problems: int = 500
    horizon: int = 128
    prefix_length: int = 32
    problem_alpha: float = 6.0
    cue_amplitude: float = 1.0


SECTION_TYPES = {
    "toylm": ToyLMSection,
    "corpus": CorpusSection,
    "sae": SaeSection,
    "identify": IdentifySection,
    "steering": SteeringSection,
    "judge": JudgeSection,
    "router": RouterSection,
    "correct": CorrectSection,
}
RUN_SECTION = "run"


def _coerce(value: Any, target: type, where: str) -> Any:
    if isinstance(value, str):
        text = value.strip()
        if target is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ConfigError([f"{where}: expected a boolean, got '{value}'"])
        if target is str:
            return text
        try:
            return target(text)
        except ValueError:
            raise ConfigError([f"{where}: expected {target.__name__}, got '{value}'"])
    if target is bool and isinstance(value, bool):
        return value
    if target is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if target is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target is str:
        return str(value)
    raise ConfigError([f"{where}: expected {target.__name__}, got {value!r}"])


def _build_section(cls: type, values: Mapping[str, Any], section: str):
    known = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError([f"unknown key '{section}.{key}'" for key in unknown])
    return cls(**{key: _coerce(v, known[key], f"{section}.{key}") for key, v in values.items()})


@dataclass
class RunConfig:
    toylm: ToyLMSection = field(default_factory=ToyLMSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    sae: SaeSection = field(default_factory=SaeSection)
    identify: IdentifySection = field(default_factory=IdentifySection)
    steering: SteeringSection = field(default_factory=SteeringSection)
    judge: JudgeSection = field(default_factory=JudgeSection)
    router: RouterSection = field(default_factory=RouterSection)
    correct: CorrectSection = field(default_factory=CorrectSection)
    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)

    def to_dict(self, include_output: bool = True) -> Dict[str, Dict[str, Any]]:
        data = {name: asdict(getattr(self, name)) for name in SECTION_TYPES}
        data[RUN_SECTION] = {"seed": self.seed}
        if include_output:
            data[RUN_SECTION]["output_dir"] = self.output_dir
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        """Strict construction: unknown sections or keys raise ConfigError"""
        return cls().updated(data)

    def updated(self, data: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        """Copy with the given section values replaced"""
        unknown = sorted(set(data) - set(SECTION_TYPES) - {RUN_SECTION})
        if unknown:
            raise ConfigError([f"unknown section '{name}'" for name in unknown])
        changes: Dict[str, Any] = {}
        for name, cls in SECTION_TYPES.items():
            if name in data:
                merged = {**asdict(getattr(self, name)), **dict(data[name])}
                changes[name] = _build_section(cls, merged, name)
        if RUN_SECTION in data:
            run = dict(data[RUN_SECTION])
            extra = sorted(set(run) - {"seed", "output_dir"})
            if extra:
                raise ConfigError([f"unknown key '{RUN_SECTION}.{key}'" for key in extra])
            if "seed" in run:
                changes["seed"] = _coerce(run["seed"], int, "run.seed")
            if "output_dir" in run:
                changes["output_dir"] = _coerce(run["output_dir"], str, "run.output_dir")
        return replace(self, **changes)

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        """Apply 'section.key=value' strings"""
        data: Dict[str, Dict[str, str]] = {}
        problems = []
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or not section or not name:
                problems.append(f"override '{item}' is not of the form section.key=value")
                continue
            data.setdefault(section, {})[name] = value
        if problems:
            raise ConfigError(problems)
        return self.updated(data)

    def validate(self) -> "RunConfig":
        """Check every range; raises ConfigError listing all violations"""
        problems: List[str] = []

        def require(condition: bool, message: str):
            if not condition:
                problems.append(message)

        t = self.toylm
        require(t.n_dim >= 2 * t.n_strategies + 1, "toylm.n_dim must be at least 2*n_strategies+1")
        require(t.n_strategies >= 2, "toylm.n_strategies must be at least 2")
        require(t.keyword_count >= 1, "toylm.keyword_count must be positive")
        require(
            t.vocab >= 3 + t.n_strategies * (t.keyword_count + 1),
            "toylm.vocab too small for reserved, answer and keyword tokens",
        )
        require(0 < t.leak < 1, "toylm.leak must be in (0, 1)")
        require(0 <= t.mix_scale and t.leak + t.mix_scale < 1, "toylm.leak + toylm.mix_scale must be below 1")
        require(t.keyword_gain > 0, "toylm.keyword_gain must be positive")
        require(t.noise_sigma >= 0, "toylm.noise_sigma must be non-negative")

        c = self.corpus
        require(c.rounds >= 1 and c.run_length >= 1, "corpus.rounds and corpus.run_length must be positive")
        require(c.temperature >= 0, "corpus.temperature must be non-negative")
        require(0 <= c.amplitude_min <= c.amplitude_max, "corpus amplitudes need 0 <= min <= max")

        s = self.sae
        require(s.m_dim > t.n_dim, "sae.m_dim must exceed toylm.n_dim")
        require(1 <= s.k <= s.m_dim, "sae.k must be in [1, m_dim]")
        require(s.steps >= 0, "sae.steps must be non-negative")
        require(s.batch_size >= 1, "sae.batch_size must be positive")
        require(s.learning_rate > 0, "sae.learning_rate must be positive")
        require(0 <= s.beta1 < 1 and 0 <= s.beta2 < 1, "sae betas must be in [0, 1)")
        require(s.dead_feature_window >= 1 and s.init_sample_size >= 1, "sae window sizes must be positive")
        require(
            c.rounds * t.n_strategies * 2 * c.run_length >= s.batch_size,
            "corpus is smaller than sae.batch_size",
        )

        i = self.identify
        require(i.top_n >= 1, "identify.top_n must be positive")
        require(i.n >= 1, "identify.n must be positive")
        require(i.top_m >= i.n, "identify.top_m must be at least identify.n")
        require(i.validation_size >= 1, "identify.validation_size must be positive")
        require(i.prefix_length >= 1 and i.horizon >= 1, "identify prefix_length and horizon must be positive")
        require(i.per_strategy >= 1 and i.pool_per_strategy >= 1, "identify selection counts must be positive")
        require(0 <= i.precision_threshold <= 1, "identify.precision_threshold must be in [0, 1]")

        st = self.steering
        require(st.alpha_start >= 1, "steering.alpha_start must be at least 1")
        require(st.min_gram >= 1 and st.min_repeats >= 2, "steering needs min_gram >= 1 and min_repeats >= 2")
        require(st.logit_boost_beta >= 0, "steering.logit_boost_beta must be non-negative")

        j = self.judge
        require(j.m_min >= 0, "judge.m_min must be non-negative")
        try:
            panel = j.panel_thresholds()
            require(len(panel) % 2 == 1 and all(m >= 0 for m in panel),
                    "judge.panel_m_min must list an odd number of non-negative counts")
        except ValueError:
            problems.append("judge.panel_m_min must be a comma-separated list of integers")

        r = self.router
        require(r.hidden_dim >= 1 and r.embed_dim >= 1, "router dimensions must be positive")
        require(r.steps >= 0 and r.batch_size >= 1, "router.steps >= 0 and router.batch_size >= 1 required")
        require(r.learning_rate > 0, "router.learning_rate must be positive")
        require(r.train_problems >= 1 and r.eval_problems >= 1, "router problem counts must be positive")

        co = self.correct
        require(co.problems >= 1 and co.horizon >= 1, "correct.problems and correct.horizon must be positive")
        require(co.prefix_length >= 2, "correct.prefix_length must be at least 2")
        require(co.problem_alpha >= 0 and co.cue_amplitude >= 0, "correct amplitudes must be non-negative")

        require(self.seed >= 0, "run.seed must be non-negative")
        require(bool(self.output_dir), "run.output_dir must not be empty")

        if problems:
            raise ConfigError(problems)
        return self

    def sae_train_config(self) -> SaeTrainConfig:
        s = self.sae
        return SaeTrainConfig(
            m_dim=s.m_dim, k=s.k, steps=s.steps, batch_size=s.batch_size,
            learning_rate=s.learning_rate, beta1=s.beta1, beta2=s.beta2,
            seed=self.seed, dead_feature_window=s.dead_feature_window,
            init_sample_size=s.init_sample_size,
        )

    def router_train_config(self) -> RouterTrainConfig:
        r = self.router
        return RouterTrainConfig(
            hidden_dim=r.hidden_dim, embed_dim=r.embed_dim, steps=r.steps,
            batch_size=r.batch_size, learning_rate=r.learning_rate, seed=self.seed,
        )

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {str(value).lower() if isinstance(value, bool) else value}"
                         for key, value in values.items())
            lines.append("")
        return "\n".join(lines)


def parse_ini(text: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError([f"malformed config file: {e}"])
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_config(path: str, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the INI file, then section.key=value overrides"""
    with open(path, "r", encoding="utf-8") as f:
        data = parse_ini(f.read())
    return RunConfig.from_dict(data).with_overrides(overrides)
