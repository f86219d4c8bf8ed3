"""Command-line entry point: one config file per run, flat key space.

Commands: gen-prompts, encode-bank, encode-images, select, train, eval,
base-to-novel. Primary artifacts are byte-deterministic for identical
configs; timestamps and host info live only in ``.meta`` sidecar files.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 network error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation, io, promptgen, trainer
from .backbone import (
    CachedVisionSource,
    SyntheticTextEncoder,
    SyntheticVisionEncoder,
    encode_text_bank,
)
from .ensemble import mean_ensemble, write_score_report
from .errors import BmcoopError, ConfigError, DataError, NumericError
from .objective import class_probabilities, encode_classes, predict
from .types import SPLITS, ClassCatalog, EmbeddingMatrix, RunConfig

log = logging.getLogger("bmcoop.cli")

COMMANDS = (
    "gen-prompts", "encode-bank", "encode-images",
    "select", "train", "eval", "base-to-novel",
)

PATH_KEYS = (
    "catalog", "manifest", "bank", "bank_cache",
    "image_cache", "image_index", "features_cache", "features_index",
    "checkpoint", "out_dir",
)
STRING_KEYS = {
    "dataset_name": "dataset",
    "eval_split": "test",
    "eval_classifier": "context",
    "llm_base_url": "",
    "llm_model": "",
    "llm_api_key_env": "BMCOOP_API_KEY",
    "llm_fallback_bank": "",
}
NUMBER_KEYS = {
    "llm_timeout": 60.0,
    "llm_max_retries": 3,
}

_RUN_FIELDS = {f.name: f.type for f in fields(RunConfig)}


@dataclass
class LoadedConfig:
    run: RunConfig
    paths: dict[str, str]
    strings: dict[str, str]
    numbers: dict[str, float]
    explicit: set[str]
    digest: str

    def path(self, key: str, required: bool = False) -> Path | None:
        value = self.paths.get(key, "")
        if not value:
            if required:
                raise ConfigError(f"config key {key!r} is required for this command")
            return None
        return Path(value)

    def out_dir(self) -> Path:
        out = self.path("out_dir") or Path(".")
        out.mkdir(parents=True, exist_ok=True)
        return out


def _coerce_run_value(key: str, value):
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        raise ConfigError(f"unsupported config key type for {key!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
    return value


def parse_config(path: str | Path, overrides: list[str] | None = None) -> LoadedConfig:
    """Load the JSON config, apply defaults, reject unknown keys, apply overrides.

    Overrides are ``key=value`` pairs referencing run-config keys only.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")

    run_kwargs: dict = {}
    paths = {k: "" for k in PATH_KEYS}
    strings = dict(STRING_KEYS)
    numbers = dict(NUMBER_KEYS)
    for key, value in doc.items():
        if key in _RUN_FIELDS:
            run_kwargs[key] = _coerce_run_value(key, value)
        elif key in PATH_KEYS:
            if not isinstance(value, str):
                raise ConfigError(f"config key {key!r} must be a path string")
            paths[key] = value
        elif key in STRING_KEYS:
            if not isinstance(value, str):
                raise ConfigError(f"config key {key!r} must be a string")
            strings[key] = value
        elif key in NUMBER_KEYS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key!r} must be a number")
            numbers[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    explicit = set(doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        if key not in _RUN_FIELDS:
            raise ConfigError(f"override {key!r} is not a run-config key")
        default = getattr(RunConfig(), key)
        try:
            if isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = raw
        except ValueError as e:
            raise ConfigError(f"override {key}={raw!r}: {e}") from e
        run_kwargs[key] = value
        explicit.add(key)

    try:
        run = RunConfig(**run_kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e

    effective = {f.name: getattr(run, f.name) for f in fields(RunConfig)}
    effective.update({k: v for k, v in paths.items()})
    effective.update(strings)
    effective.update(numbers)
    # explicit epochs changes base-to-novel behavior, so it is part of identity
    effective["epochs_explicit"] = "epochs" in explicit
    digest = hashlib.sha256(
        json.dumps(effective, sort_keys=True).encode("utf-8")
    ).hexdigest()

    if strings["eval_split"] not in SPLITS:
        raise ConfigError(f"eval_split must be one of {SPLITS}")
    if strings["eval_classifier"] not in ("context", "ensemble"):
        raise ConfigError("eval_classifier must be 'context' or 'ensemble'")
    return LoadedConfig(
        run=run, paths=paths, strings=strings, numbers=numbers,
        explicit=explicit, digest=digest,
    )


def _write_meta(artifact: Path, cfg: LoadedConfig, command: str) -> None:
    meta = {
        "command": command,
        "config_digest": cfg.digest,
        "seed": cfg.run.seed,
        "created_unix": time.time(),
        "host": platform.node(),
    }
    artifact.with_suffix(artifact.suffix + ".meta").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ── shared pipeline pieces ───────────────────────────────────────────

def _text_handle(cfg: LoadedConfig) -> SyntheticTextEncoder:
    run = cfg.run
    return SyntheticTextEncoder(
        seed=run.encoder_seed,
        embedding_dim=run.embedding_dim,
        token_width=run.token_width,
        tau=run.tau,
    )


def _load_catalog_manifest(cfg: LoadedConfig):
    catalog = io.load_catalog(cfg.path("catalog", required=True))
    manifest = io.load_manifest(cfg.path("manifest", required=True), catalog)
    return catalog, manifest


def _image_source(cfg: LoadedConfig) -> CachedVisionSource:
    matrix = io.read_embedding_cache(cfg.path("image_cache", required=True))
    index = io.load_cache_index(cfg.path("image_index", required=True))
    return CachedVisionSource(matrix=matrix, index=index)


def _bank_embeddings(cfg: LoadedConfig, catalog: ClassCatalog) -> list[np.ndarray]:
    """Per-class (N, D) arrays from the stacked class-major bank cache."""
    cache = io.read_embedding_cache(cfg.path("bank_cache", required=True), axis="per-prompt")
    n_classes = len(catalog)
    if cache.row_count == 0 or cache.row_count % n_classes != 0:
        raise DataError(
            f"bank cache has {cache.row_count} rows, not a multiple of "
            f"{n_classes} classes"
        )
    per_class = cache.row_count // n_classes
    values = cache.values.astype(np.float64)
    return [values[c * per_class : (c + 1) * per_class] for c in range(n_classes)]


def _test_batch(cfg, catalog, manifest, source, class_names: list[str]):
    """Embeddings and labels for the eval split, restricted to ``class_names``."""
    records = [
        r for r in manifest.items(split=cfg.strings["eval_split"])
        if r.class_name in set(class_names)
    ]
    if not records:
        raise DataError(
            f"no items in split {cfg.strings['eval_split']!r} for the requested classes"
        )
    images = source.encode([r.item_id for r in records]).values
    labels = np.asarray([class_names.index(r.class_name) for r in records], dtype=np.intp)
    return images, labels


def _context_for_eval(cfg: LoadedConfig, handle: SyntheticTextEncoder):
    ckpt = cfg.path("checkpoint")
    if ckpt is not None:
        state = trainer.load_checkpoint(ckpt)
        if state.ctx.token_width != handle.token_width:
            raise DataError(
                f"checkpoint width {state.ctx.token_width} does not match "
                f"encoder width {handle.token_width}"
            )
        return state.ctx
    # no checkpoint: fresh template-initialized context (zero-shot)
    return trainer.initial_state(handle, cfg.run).ctx


# ── commands ─────────────────────────────────────────────────────────

def cmd_gen_prompts(cfg: LoadedConfig) -> None:
    catalog = io.load_catalog(cfg.path("catalog", required=True))
    endpoint = promptgen.LlmEndpointConfig(
        base_url=cfg.strings["llm_base_url"],
        model=cfg.strings["llm_model"],
        api_key_env_var=cfg.strings["llm_api_key_env"],
        timeout=float(cfg.numbers["llm_timeout"]),
        max_retries=int(cfg.numbers["llm_max_retries"]),
    )
    fallback = cfg.strings["llm_fallback_bank"] or None
    bank = promptgen.fetch_prompts(
        endpoint, catalog, cfg.run.prompts_per_class, fallback_bank=fallback
    )
    out = cfg.path("bank", required=True)
    io.write_prompt_bank(bank, out)
    _write_meta(out, cfg, "gen-prompts")
    print(f"wrote prompt bank: {out}")


def cmd_encode_bank(cfg: LoadedConfig) -> None:
    catalog = io.load_catalog(cfg.path("catalog", required=True))
    bank = io.load_prompt_bank(cfg.path("bank", required=True))
    bank.validate(catalog)
    diagnostics = promptgen.validate_bank(bank, catalog)
    for diag in diagnostics:
        log.warning("bank diagnostic: %s", diag)
    handle = _text_handle(cfg)
    per_class = encode_text_bank(handle, bank)
    stacked = np.vstack([per_class[entry.name].values for entry in catalog])
    out = cfg.path("bank_cache", required=True)
    io.write_embedding_cache(EmbeddingMatrix(values=stacked, axis="per-prompt"), out)
    _write_meta(out, cfg, "encode-bank")
    print(f"wrote bank cache: {out} ({stacked.shape[0]} rows)")


def cmd_encode_images(cfg: LoadedConfig) -> None:
    features = io.read_embedding_cache(cfg.path("features_cache", required=True))
    index = io.load_cache_index(cfg.path("features_index", required=True))
    run = cfg.run
    encoder = SyntheticVisionEncoder(
        seed=run.encoder_seed,
        feature_dim=features.dim,
        embedding_dim=run.embedding_dim,
    )
    embedded = encoder.encode(features.values.astype(np.float64))
    out_cache = cfg.path("image_cache", required=True)
    out_index = cfg.path("image_index", required=True)
    io.write_embedding_cache(embedded, out_cache)
    io.write_cache_index(index, out_index)
    _write_meta(out_cache, cfg, "encode-images")
    print(f"wrote image cache: {out_cache} ({embedded.row_count} rows)")


def cmd_select(cfg: LoadedConfig) -> None:
    catalog, manifest = _load_catalog_manifest(cfg)
    source = _image_source(cfg)
    bank_embeds = _bank_embeddings(cfg, catalog)
    support = trainer.sample_few_shot(manifest, catalog, cfg.run.shots, cfg.run.seed)
    images = source.encode(support.item_ids).values
    _, _, reports = trainer.prepare_ensembles(
        catalog.names, bank_embeds, images, cfg.run
    )
    out = cfg.out_dir() / "prompt_scores.json"
    write_score_report(
        reports, out,
        header={
            "config_digest": cfg.digest,
            "seed": cfg.run.seed,
            "zeta_s": cfg.run.zeta_s,
            "beta": cfg.run.beta,
        },
    )
    _write_meta(out, cfg, "select")
    print(f"wrote prompt score report: {out}")


def _train_common(cfg: LoadedConfig, class_names: list[str], epochs: int):
    catalog, manifest = _load_catalog_manifest(cfg)
    source = _image_source(cfg)
    handle = _text_handle(cfg)
    run = cfg.run.with_overrides(epochs=epochs)

    support = trainer.sample_few_shot(
        manifest, catalog, run.shots, run.seed,
        class_names=class_names if class_names != catalog.names else None,
    )
    support = support.with_embeddings(source.encode(support.item_ids).values)

    ensemble_mean_arr = teacher = None
    if run.lambda1 != 0.0 or run.lambda2 != 0.0:
        bank_embeds = _bank_embeddings(cfg, catalog)
        keep = [catalog.names.index(n) for n in class_names]
        bank_embeds = [bank_embeds[i] for i in keep]
        ensemble_mean_arr, teacher, _ = trainer.prepare_ensembles(
            class_names, bank_embeds, support.embeddings, run
        )

    state, logs = trainer.train_run(
        support, class_names, handle, run,
        ensemble_mean=ensemble_mean_arr, teacher_ensemble=teacher,
    )
    return catalog, manifest, source, handle, state, logs


def cmd_train(cfg: LoadedConfig) -> None:
    catalog = io.load_catalog(cfg.path("catalog", required=True))
    _, _, _, _, state, logs = _train_common(cfg, catalog.names, cfg.run.epochs)
    out = cfg.out_dir()
    ckpt = out / "checkpoint.ckpt"
    log_path = out / "train_log.tsv"
    trainer.save_checkpoint(state, ckpt)
    trainer.write_training_log(logs, log_path)
    _write_meta(ckpt, cfg, "train")
    _write_meta(log_path, cfg, "train")
    final = logs[-1].train_acc if logs else float("nan")
    print(f"wrote checkpoint: {ckpt} (final train accuracy {100 * final:.2f}%)")


def cmd_eval(cfg: LoadedConfig) -> None:
    catalog, manifest = _load_catalog_manifest(cfg)
    source = _image_source(cfg)
    handle = _text_handle(cfg)
    images, labels = _test_batch(cfg, catalog, manifest, source, catalog.names)

    if cfg.strings["eval_classifier"] == "ensemble":
        class_embeds = mean_ensemble(_bank_embeddings(cfg, catalog))
    else:
        ctx = _context_for_eval(cfg, handle)
        class_embeds, _ = encode_classes(handle, ctx, catalog.names)
    probs = class_probabilities(images, class_embeds, handle.tau)
    acc = evaluation.accuracy(predict(probs), labels)

    report = evaluation.EvalReport(
        dataset=cfg.strings["dataset_name"],
        seeds=[cfg.run.seed],
        accuracies=[acc],
        extra={"config_digest": cfg.digest, "classifier": cfg.strings["eval_classifier"]},
    )
    out = cfg.out_dir() / "eval_report.json"
    report.write_json(out)
    _write_meta(out, cfg, "eval")
    print(evaluation.render_table([report]), end="")
    print(f"wrote eval report: {out}")


def cmd_base_to_novel(cfg: LoadedConfig) -> None:
    catalog = io.load_catalog(cfg.path("catalog", required=True))
    base_names, novel_names = evaluation.base_novel_split(catalog)
    # convention: 50 epochs here unless the config pins epochs explicitly
    epochs = cfg.run.epochs if "epochs" in cfg.explicit else 50
    _, manifest, source, handle, state, logs = _train_common(cfg, base_names, epochs)

    def _split_accuracy(names: list[str]) -> float:
        images, labels = _test_batch(cfg, catalog, manifest, source, names)
        embeds, _ = encode_classes(handle, state.ctx, names)
        probs = class_probabilities(images, embeds, handle.tau)
        return evaluation.accuracy(predict(probs), labels)

    base_acc = _split_accuracy(base_names)
    novel_acc = _split_accuracy(novel_names)
    all_images, all_labels = _test_batch(cfg, catalog, manifest, source, catalog.names)
    all_embeds, _ = encode_classes(handle, state.ctx, catalog.names)
    overall = evaluation.accuracy(predict(class_probabilities(all_images, all_embeds, handle.tau)), all_labels)

    report = evaluation.EvalReport(
        dataset=cfg.strings["dataset_name"],
        seeds=[cfg.run.seed],
        accuracies=[overall],
        base_acc=base_acc,
        novel_acc=novel_acc,
        extra={
            "config_digest": cfg.digest,
            "base_classes": base_names,
            "novel_classes": novel_names,
            "train_epochs": epochs,
        },
    )
    out = cfg.out_dir()
    ckpt = out / "checkpoint.ckpt"
    trainer.save_checkpoint(state, ckpt)
    trainer.write_training_log(logs, out / "train_log.tsv")
    report_path = out / "base_to_novel_report.json"
    report.write_json(report_path)
    for artifact in (ckpt, report_path):
        _write_meta(artifact, cfg, "base-to-novel")
    print(evaluation.render_table([report]), end="")
    print(f"wrote base-to-novel report: {report_path}")


_HANDLERS = {
    "gen-prompts": cmd_gen_prompts,
    "encode-bank": cmd_encode_bank,
    "encode-images": cmd_encode_images,
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    "base-to-novel": cmd_base_to_novel,
}


def run(command: str, config_path: str, overrides: list[str] | None = None) -> int:
    """Execute one command; returns the process exit status."""
    try:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        cfg = parse_config(config_path, overrides)
        _HANDLERS[command](cfg)
        return 0
    except NumericError as e:
        _dump_abort_state(config_path, e)
        _print_error(e)
        return e.exit_code
    except BmcoopError as e:
        _print_error(e)
        return e.exit_code


def _print_error(e: BmcoopError) -> None:
    message = " ".join(str(e).split())
    print(f"bmcoop-error category={e.category} message={message!r}", file=sys.stderr)


def _dump_abort_state(config_path: str, e: NumericError) -> None:
    try:
        dump = Path(config_path).with_suffix(".abort.json")
        dump.write_text(json.dumps(e.state, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.error("wrote abort state dump: %s", dump)
    except OSError:
        log.error("could not write abort state dump")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bmcoop",
        description="Prompt-context learning runs driven by one JSON config.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", help="path to the JSON run config")
    parser.add_argument(
        "overrides", nargs="*",
        help="key=value overrides of run-config keys",
    )
    args = parser.parse_args(argv)
    level = os.environ.get("BMCOOP_LOG", "info").lower()
    logging.basicConfig(level=logging.DEBUG if level == "debug" else logging.INFO)
    return run(args.command, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
