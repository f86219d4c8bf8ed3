"""Client for materializing prompt banks from a chat-completion endpoint.

Generation is inherently nondeterministic, so nothing downstream ever
calls this module: training and evaluation consume only persisted bank
files. The API key is read from a named environment variable and is never
written into banks or logs.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass

import requests

from .errors import DataError, NetworkError
from .io import load_prompt_bank
from .types import ClassCatalog, PromptBank

log = logging.getLogger("bmcoop.promptgen")

QUERY_TEMPLATE = (
    "Give {n} textual descriptions of visual discriminative features "
    "for distinct medical cases of {class_name} found in {modality}."
)

# leading enumerators: "1." / "1)" / "(1)" / "-" / "*" / "•"
_ENUMERATOR = re.compile(r"^\s*(?:\(?\d+[.)]\s*|[-*•]\s+)")


@dataclass
class LlmEndpointConfig:
    base_url: str
    model: str
    api_key_env_var: str = "BMCOOP_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3


def build_query(class_name: str, modality: str, n: int) -> str:
    """Fill the generation query template; slot values pass through verbatim."""
    if not class_name.strip():
        raise DataError("class name slot is empty")
    if not modality.strip():
        raise DataError("modality slot is empty")
    if n < 1:
        raise DataError(f"prompt count must be >= 1, got {n}")
    return QUERY_TEMPLATE.format(n=n, class_name=class_name, modality=modality)


def parse_prompt_lines(text: str) -> list[str]:
    """Split a completion into prompt strings, stripping list enumerators."""
    prompts = []
    for line in text.splitlines():
        stripped = _ENUMERATOR.sub("", line).strip()
        if stripped:
            prompts.append(stripped)
    return prompts


def _post_chat(config: LlmEndpointConfig, query: str) -> str:
    api_key = os.environ.get(config.api_key_env_var)
    if not api_key:
        raise NetworkError(
            f"environment variable {config.api_key_env_var!r} is not set"
        )
    url = config.base_url.rstrip("/") + "/chat/completions"
    payload = {
        "model": config.model,
        "messages": [{"role": "user", "content": query}],
    }
    log.debug("POST %s model=%s key=<redacted>", url, config.model)
    try:
        response = requests.post(
            url,
            json=payload,
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=config.timeout,
        )
        response.raise_for_status()
        body = response.json()
        return body["choices"][0]["message"]["content"]
    except requests.Timeout as e:
        raise NetworkError(f"request to {url} timed out after {config.timeout}s") from e
    except requests.RequestException as e:
        raise NetworkError(f"request to {url} failed: {e}") from e
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise NetworkError(f"unexpected response shape from {url}: {e}") from e


def fetch_prompts(
    config: LlmEndpointConfig,
    catalog: ClassCatalog,
    n: int,
    fallback_bank: str | None = None,
    retry_sleep: float = 1.0,
) -> PromptBank:
    """Collect exactly ``n`` prompts per catalog class.

    Short responses trigger bounded re-queries whose parsed lines are
    merged with exact-string deduplication. If any class still falls short
    after ``max_retries`` attempts the whole fetch fails, listing the
    deficient classes. With ``fallback_bank`` set, the bank is loaded from
    disk instead and no network activity happens.
    """
    if fallback_bank is not None:
        bank = load_prompt_bank(fallback_bank)
        bank.validate(catalog, n_expected=n)
        return bank

    prompts: dict[str, list[str]] = {}
    modalities: dict[str, str] = {}
    deficits: dict[str, int] = {}
    for entry in catalog:
        query = build_query(entry.name, entry.modality, n)
        collected: list[str] = []
        seen: set[str] = set()
        for attempt in range(config.max_retries + 1):
            if attempt > 0 and retry_sleep > 0:
                time.sleep(retry_sleep)
            for line in parse_prompt_lines(_post_chat(config, query)):
                if line not in seen:
                    seen.add(line)
                    collected.append(line)
            if len(collected) >= n:
                break
        if len(collected) < n:
            deficits[entry.name] = len(collected)
            continue
        prompts[entry.name] = collected[:n]
        modalities[entry.name] = entry.modality
    if deficits:
        short = ", ".join(f"{k} ({v}/{n})" for k, v in deficits.items())
        raise NetworkError(f"could not collect {n} prompts for: {short}")
    return PromptBank(
        prompts=prompts,
        modalities=modalities,
        query_template=QUERY_TEMPLATE,
        generator={"model": config.model},
    )


def validate_bank(bank: PromptBank, catalog: ClassCatalog, n_expected: int | None = None) -> list[str]:
    """Non-fatal diagnostics: missing classes, duplicates, empties, count drift."""
    diagnostics: list[str] = []
    for entry in catalog:
        if entry.name not in bank.prompts:
            diagnostics.append(f"missing class: {entry.name}")
    counts = {len(v) for v in bank.prompts.values()}
    if len(counts) > 1:
        diagnostics.append(f"inconsistent prompt counts across classes: {sorted(counts)}")
    elif n_expected is not None and counts and counts != {n_expected}:
        diagnostics.append(f"prompt count {counts.pop()} differs from expected {n_expected}")
    for name, plist in bank.prompts.items():
        seen: set[str] = set()
        for p in plist:
            if not p.strip():
                diagnostics.append(f"empty prompt in class: {name}")
            elif p in seen:
                diagnostics.append(f"duplicate prompt in class {name}: {p[:60]!r}")
            seen.add(p)
    return diagnostics
