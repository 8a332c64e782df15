"""PSO parameter advisors.

``rule_advise`` is a fixed diagnosis table and doubles as the fallback for
the remote advisor, which asks an OpenAI-style chat-completions endpoint for
new parameters. Remote failures of any kind degrade to the rule table; they
never propagate into a selection run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import httpx

from laeids.errors import AdvisorError, AdvisorHttpError, AdvisorTimeout, MalformedResponse
from laeids.pso_select import AdvisorSummary, PsoParams

log = logging.getLogger(__name__)


class Diagnosis(str, Enum):
    HEALTHY = "HEALTHY"
    PREMATURE_CONVERGENCE = "PREMATURE_CONVERGENCE"
    STAGNATION = "STAGNATION"
    DIVERGENT_SEARCH = "DIVERGENT_SEARCH"


@dataclass(frozen=True)
class AdvisorDirective:
    new_params: PsoParams
    diagnosis: Diagnosis
    rationale: str = ""
    source: str = "rule"  # "rule", "llm" or "fallback"
    fallback_reason: Optional[str] = None

    def with_params(self, params: PsoParams) -> "AdvisorDirective":
        return replace(self, new_params=params)

    def as_fallback(self, reason: str) -> "AdvisorDirective":
        return replace(self, source="fallback", fallback_reason=reason)

    def to_json(self) -> dict:
        return {"params": self.new_params.to_json(), "diagnosis": self.diagnosis.value,
                "rationale": self.rationale, "source": self.source, "fallback_reason": self.fallback_reason}


@dataclass(frozen=True)
class RuleThresholds:
    low_diversity: float = 0.15
    premature_stall: int = 3
    stagnation_stall: int = 5
    decline_epochs: int = 3


def rule_advise(summary: AdvisorSummary, thresholds: RuleThresholds = RuleThresholds()) -> AdvisorDirective:
    p = summary.params
    div = summary.population_diversity
    stall = summary.epochs_since_improvement
    if div < thresholds.low_diversity and stall >= thresholds.premature_stall:
        new = PsoParams(p.w + 0.2, p.c1 + 0.5, p.c2 - 0.5, p.v_max)
        diag, why = Diagnosis.PREMATURE_CONVERGENCE, "swarm collapsed without progress; widen exploration"
    elif div >= thresholds.low_diversity and stall >= thresholds.stagnation_stall:
        new = PsoParams(p.w - 0.1, p.c1, p.c2 + 0.5, p.v_max)
        diag, why = Diagnosis.STAGNATION, "diverse swarm but no progress; pull toward the global best"
    elif summary.mean_decline_streak >= thresholds.decline_epochs:
        new = PsoParams(p.w - 0.2, p.c1, p.c2, p.v_max)
        diag, why = Diagnosis.DIVERGENT_SEARCH, "mean fitness keeps falling; damp inertia"
    else:
        new = p
        diag, why = Diagnosis.HEALTHY, "no intervention"
    return AdvisorDirective(new.clamped(), diag, why, "rule")


class RuleAdvisor:
    def __init__(self, thresholds: RuleThresholds = RuleThresholds()):
        self.thresholds = thresholds

    def __call__(self, summary: AdvisorSummary) -> AdvisorDirective:
        return rule_advise(summary, self.thresholds)

    def repository_pick(self, candidates, profile) -> Optional[str]:
        return None


@dataclass(frozen=True)
class RemoteAdvisorConfig:
    endpoint: str
    model: str = "gpt-4o-mini"
    timeout: float = 30.0
    max_retries: int = 2
    api_key_env: Optional[str] = "OPENAI_API_KEY"
    backoff_seconds: float = 0.5
    log_dir: Optional[str] = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def url(self) -> str:
        u = self.endpoint.rstrip("/")
        return u if u.endswith("/chat/completions") else u + "/chat/completions"


PROMPT_TEMPLATE = """You supervise a binary particle swarm that selects network-traffic features.
After each epoch you receive a summary of the swarm and must return parameters for the next epoch.

Current epoch summary:
- epoch: {epoch}
- best fitness: {best_fitness:.6f}
- mean fitness: {mean_fitness:.6f}
- population diversity (mean pairwise Hamming / F): {diversity:.6f}
- epochs since the best fitness improved: {stall}
- consecutive epochs of falling mean fitness: {decline}
- current parameters: w={w:.4f}, c1={c1:.4f}, c2={c2:.4f}

Your previous directives (oldest first):
{history}

Diagnose the swarm as one of HEALTHY, PREMATURE_CONVERGENCE, STAGNATION, DIVERGENT_SEARCH and choose
new parameters with 0 <= w <= 1.2, 0 <= c1 <= 4, 0 <= c2 <= 4.
Reply with a single JSON object and nothing else:
{{"w": <number>, "c1": <number>, "c2": <number>, "diagnosis": "<label>", "rationale": "<one sentence>"}}
"""

PICK_TEMPLATE = """A new device joined an aerial IoT swarm and needs a feature subset from a repository.

New device: class={device_class}, attributes={attributes}

Candidate repository entries:
{candidates}

Pick the entry whose device is most similar. Reply with a single JSON object and nothing else:
{{"entry_id": "<id>"}}
"""

TEMPLATE_DIGEST = hashlib.sha256((PROMPT_TEMPLATE + PICK_TEMPLATE).encode()).hexdigest()[:16]


def render_prompt(summary: AdvisorSummary, history: Sequence[AdvisorDirective] = ()) -> str:
    lines = [f"- {d.diagnosis.value}: w={d.new_params.w:.4f}, c1={d.new_params.c1:.4f}, c2={d.new_params.c2:.4f}"
             for d in history] or ["- (none)"]
    p = summary.params
    return PROMPT_TEMPLATE.format(
        epoch=summary.epoch, best_fitness=summary.best_fitness, mean_fitness=summary.mean_fitness,
        diversity=summary.population_diversity, stall=summary.epochs_since_improvement,
        decline=summary.mean_decline_streak, w=p.w, c1=p.c1, c2=p.c2, history="\n".join(lines))


def _log_exchange(cfg: RemoteAdvisorConfig, body: dict, outcome: dict) -> None:
    if not cfg.log_dir:
        return
    path = Path(cfg.log_dir)
    path.mkdir(parents=True, exist_ok=True)
    record = {"url": cfg.url, "headers": {"Authorization": "Bearer ***REDACTED***"}, "request": body, **outcome}
    with open(path / "advisor_exchanges.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def chat_completion(prompt: str, cfg: RemoteAdvisorConfig) -> str:
    """Send one user message and return the assistant content.

    Timeouts and transport/5xx errors are retried ``cfg.max_retries`` times.
    """
    headers = {"Content-Type": "application/json"}
    if cfg.api_key_env:
        key = os.environ.get(cfg.api_key_env, "").strip()
        if not key:
            raise AdvisorError(f"environment variable {cfg.api_key_env} is not set")
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
        "response_format": {"type": "json_object"},
    }
    last: Optional[AdvisorError] = None
    for attempt in range(cfg.max_retries + 1):
        if attempt and cfg.backoff_seconds:
            time.sleep(cfg.backoff_seconds * attempt)
        try:
            resp = httpx.post(cfg.url, json=body, headers=headers, timeout=cfg.timeout)
        except httpx.TimeoutException as exc:
            last = AdvisorTimeout(f"no answer within {cfg.timeout}s")
            _log_exchange(cfg, body, {"error": repr(exc)})
            continue
        except httpx.HTTPError as exc:
            last = AdvisorHttpError(str(exc))
            _log_exchange(cfg, body, {"error": repr(exc)})
            continue
        _log_exchange(cfg, body, {"status": resp.status_code, "response": resp.text})
        if resp.status_code >= 500 or resp.status_code == 429:
            last = AdvisorHttpError(f"HTTP {resp.status_code}")
            continue
        if resp.status_code >= 400:
            raise AdvisorHttpError(f"HTTP {resp.status_code}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response envelope: {exc}") from None
        if not isinstance(content, str):
            raise MalformedResponse("message content is not a string")
        return content
    raise last


def _number(d: dict, key: str) -> float:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise MalformedResponse(f"field {key!r} is not a finite number")
    return float(v)


def parse_directive(content: str, v_max: float = 4.0) -> AdvisorDirective:
    try:
        d = json.loads(content)
    except json.JSONDecodeError as exc:
        raise MalformedResponse(f"reply is not JSON: {exc}") from None
    if not isinstance(d, dict):
        raise MalformedResponse("reply is not a JSON object")
    params = PsoParams(_number(d, "w"), _number(d, "c1"), _number(d, "c2"), v_max).clamped()
    try:
        diag = Diagnosis(str(d.get("diagnosis", "")).strip().upper())
    except ValueError:
        raise MalformedResponse(f"unknown diagnosis {d.get('diagnosis')!r}") from None
    rationale = d.get("rationale", "")
    return AdvisorDirective(params, diag, rationale if isinstance(rationale, str) else str(rationale), "llm")


def llm_advise(summary: AdvisorSummary, history: Sequence[AdvisorDirective], cfg: RemoteAdvisorConfig,
               thresholds: RuleThresholds = RuleThresholds()) -> AdvisorDirective:
    """Ask the endpoint for new parameters; any failure yields the rule directive marked as fallback."""
    try:
        content = chat_completion(render_prompt(summary, history), cfg)
        return parse_directive(content, summary.params.v_max)
    except AdvisorError as exc:
        log.info("remote advisor fell back to rules: %s", exc)
        return rule_advise(summary, thresholds).as_fallback(f"{type(exc).__name__}: {exc}")


def _parse_pick(content: str) -> Optional[str]:
    text = content.strip()
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        return text.strip('"\' ') or None
    if isinstance(d, dict):
        v = d.get("entry_id")
        return v if isinstance(v, str) else None
    return d if isinstance(d, str) else None


def repository_pick(candidates, profile, cfg: RemoteAdvisorConfig) -> Optional[str]:
    """Let the endpoint choose among 1-3 repository entries; None on any failure or unknown id."""
    if not 1 <= len(candidates) <= 3:
        raise ValueError("repository_pick takes 1 to 3 candidates")
    lines = [f"- id={e.entry_id}: class={e.profile.device_class}, attributes={list(e.profile.attributes)}"
             for e in candidates]
    prompt = PICK_TEMPLATE.format(device_class=profile.device_class, attributes=list(profile.attributes),
                                  candidates="\n".join(lines))
    try:
        pick = _parse_pick(chat_completion(prompt, cfg))
    except AdvisorError as exc:
        log.info("repository pick failed: %s", exc)
        return None
    return pick if pick in {e.entry_id for e in candidates} else None


class LlmAdvisor:
    """Stateful wrapper keeping the last ``history`` directives for the prompt."""

    def __init__(self, cfg: RemoteAdvisorConfig, history: int = 3, thresholds: RuleThresholds = RuleThresholds()):
        self.cfg = cfg
        self.thresholds = thresholds
        self.history: deque = deque(maxlen=history)

    def __call__(self, summary: AdvisorSummary) -> AdvisorDirective:
        d = llm_advise(summary, list(self.history), self.cfg, self.thresholds)
        self.history.append(d)
        return d

    def repository_pick(self, candidates, profile) -> Optional[str]:
        return repository_pick(list(candidates)[:3], profile, self.cfg)
