"""Operator CLI: pipeline stages as subcommands over one run directory.

Layout: ``run/{corpus.jsonl, splits/, traces/, sft/, predictions/, reports/}``.
Stages compose by convention; every artifact starts with a provenance
header (tool version, config digest, input digests) and rerunning a stage
with unchanged inputs reproduces it byte for byte. Configuration
precedence is flags > config file > environment.

Exit codes: 0 ok, 1 config error, 2 data error, 3 network error.
"""

from __future__ import annotations

import contextlib
import json
import os
import random
import sys
from pathlib import Path

import click
import yaml

from . import __version__
from .corpus import (
    Corpus,
    Label,
    PerturbationRecord,
    Split,
    assign_split,
    balanced_sample_indices,
    compute_stats,
    holdout_cell_line,
    ingest_corpus,
    rebalance,
    render_stats_table,
    stats_to_dict,
)
from .errors import ConfigError, CorpusError, GatewayAuthError, GatewayError
from .evaluation import (
    Prediction,
    Protocol,
    build_report,
    load_report,
    render_report_table,
    run_predictions,
    write_predictions,
)
from .gateway import Gateway, GatewayConfig, MockFixture, mock_gateway
from .io import atomic_write_text, canonical_json, digest_file, read_jsonl, sha256_hex, write_jsonl
from .synthesis import (
    ReasoningTrace,
    build_baseline_examples,
    build_sft_examples,
    generate_approach1,
    generate_approach2,
    write_trace_log,
)

PROTOCOL_BY_FLAG = {"standard": Protocol.STANDARD, "direction": Protocol.DIRECTION_GIVEN}


class RunContext:
    def __init__(self, run_dir: Path, config_path: Path | None):
        self.run_dir = run_dir
        self.config: dict = {}
        if config_path is not None:
            try:
                loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot load config file {config_path}: {exc}") from exc
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError(f"config file {config_path} must hold a mapping")
            self.config = loaded or {}

    def cfg(self, *keys, default=None):
        node = self.config
        for key in keys:
            if not isinstance(node, dict) or key not in node:
                return default
            node = node[key]
        return node

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)


def resolve(*candidates, default=None, required: str | None = None):
    """First non-None wins: flag, then config value, then environment."""
    for value in candidates:
        if value is not None:
            return value
    if default is not None:
        return default
    if required:
        raise ConfigError(f"missing required setting: {required}")
    return None


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Advisory one-command-at-a-time lock per run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"run directory is locked by another command ({lock_path}); "
            "remove the file if that run is dead"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.unlink(lock_path)


def stage_header(ctx: RunContext, stage: str, stage_config: dict, inputs: dict[str, Path]) -> dict:
    digest = sha256_hex(canonical_json(stage_config))
    header = {
        "artifact": stage,
        "tool": f"pertcot {__version__}",
        "config_digest": digest,
        "inputs": {name: digest_file(path) for name, path in sorted(inputs.items())},
    }
    _update_config_lock(ctx, stage, stage_config)
    return header


def _update_config_lock(ctx: RunContext, stage: str, stage_config: dict) -> None:
    lock_path = ctx.path("config.lock")
    merged: dict = {}
    if lock_path.exists():
        with contextlib.suppress(json.JSONDecodeError, OSError):
            merged = json.loads(lock_path.read_text(encoding="utf-8"))
    merged[stage] = stage_config
    atomic_write_text(lock_path, json.dumps(merged, indent=2, sort_keys=True) + "\n")


def require_artifact(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CorpusError(f"missing upstream artifact {path}; run `pertcot {hint}` first")
    return path


def load_records(path: Path) -> Corpus:
    records = []
    for row in read_jsonl(path):
        records.append(PerturbationRecord(
            cell_line=row["cell_line"],
            perturbation_gene=row["perturbation"],
            target_gene=row["gene"],
            label=Label(row["label"]),
            split=Split(row["split"]) if row.get("split") else Split.UNASSIGNED,
        ))
    return records


def write_records(path: Path, records: Corpus, header: dict) -> None:
    write_jsonl(path, (r.to_row() for r in records), header=header)


def build_backend_gateway(ctx: RunContext, backend, fixture, base_url, api_key_env,
                          max_in_flight, retry_budget, requests_per_minute) -> tuple[Gateway, dict]:
    """Gateway plus the resolved settings that go into the stage config."""
    cache_dir = ctx.path("cache")
    settings = {
        "backend": backend,
        "base_url": resolve(base_url, ctx.cfg("gateway", "base_url"),
                            os.environ.get("PERTCOT_BASE_URL"),
                            default="http://localhost:8000"),
        "api_key_env_var": resolve(api_key_env, ctx.cfg("gateway", "api_key_env_var"),
                                   default="PERTCOT_API_KEY"),
        "max_in_flight": int(resolve(max_in_flight, ctx.cfg("gateway", "max_in_flight"), default=8)),
        "retry_budget": int(resolve(retry_budget, ctx.cfg("gateway", "retry_budget"), default=4)),
        "requests_per_minute": resolve(requests_per_minute,
                                       ctx.cfg("gateway", "requests_per_minute")),
    }
    config = GatewayConfig(
        base_url=settings["base_url"],
        api_key_env_var=settings["api_key_env_var"],
        max_in_flight=settings["max_in_flight"],
        retry_budget=settings["retry_budget"],
        cache_dir=cache_dir,
        requests_per_minute=settings["requests_per_minute"],
    )
    if backend == "mock":
        if fixture is None:
            raise ConfigError("--backend mock requires --fixture")
        settings["fixture"] = str(fixture)
        gateway, _ = mock_gateway(MockFixture.from_file(fixture), config=config)
        return gateway, settings
    return Gateway(config), settings


def progress_printer(label: str):
    def show(progress):
        if progress.done % 25 == 0 or progress.done == progress.total:
            click.echo(
                f"{label}: {progress.done}/{progress.total} done, "
                f"{progress.failed} failed, {progress.cached} cached",
                err=True,
            )
    return show


@click.group()
@click.option("--run-dir", type=click.Path(path_type=Path), default=Path("run"),
              show_default=True, help="Directory all artifacts are written under.")
@click.option("--config", "config_path", type=click.Path(path_type=Path, exists=True),
              default=None, help="YAML config file (flags override it).")
@click.version_option(version=__version__)
@click.pass_context
def cli(click_ctx, run_dir: Path, config_path: Path | None):
    """Reasoning-trace synthesis and evaluation pipeline for perturbation outcomes."""
    click_ctx.obj = RunContext(run_dir, config_path)


@cli.command("ingest")
@click.option("--corpus", "corpus_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default=None,
              help="Inferred from the suffix when omitted.")
@click.pass_obj
def cmd_ingest(ctx: RunContext, corpus_path: Path, fmt: str | None):
    """Validate and normalize a corpus file into the run directory."""
    with run_lock(ctx.run_dir):
        records = ingest_corpus(corpus_path, format=fmt)
        stage_config = {"corpus": str(corpus_path), "format": fmt or "auto"}
        header = stage_header(ctx, "corpus", stage_config, {"corpus": corpus_path})
        out = ctx.path("corpus.jsonl")
        write_records(out, records, header)
        click.echo(f"ingested {len(records)} records -> {out}")


@cli.command("stats")
@click.option("--corpus", "corpus_path", type=click.Path(path_type=Path, exists=True), default=None,
              help="Defaults to the ingested run corpus.")
@click.pass_obj
def cmd_stats(ctx: RunContext, corpus_path: Path | None):
    """Dataset statistics by cell line, label, and split."""
    with run_lock(ctx.run_dir):
        source = corpus_path or require_artifact(ctx.path("corpus.jsonl"), "ingest")
        records = load_records(source) if source.suffix == ".jsonl" else ingest_corpus(source)
        stats = compute_stats(records)
        table = render_stats_table(stats)
        stage_config = {"corpus": str(source)}
        header = stage_header(ctx, "stats", stage_config, {"corpus": source})
        atomic_write_text(ctx.path("reports", "stats.txt"),
                          "# " + canonical_json(header) + "\n" + table)
        # Insertion order keeps the canonical cell-line order in the file;
        # construction is deterministic so the bytes are too.
        machine = {"_provenance": header, **stats_to_dict(stats)}
        atomic_write_text(ctx.path("reports", "stats.json"),
                          json.dumps(machine, indent=2) + "\n")
        click.echo(table, nl=False)


@cli.command("split")
@click.option("--fraction", type=float, default=0.75, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--holdout", type=str, default=None,
              help="Hold out one entire cell line as the test set.")
@click.option("--external", is_flag=True,
              help="Trust the split column already present in the corpus.")
@click.pass_obj
def cmd_split(ctx: RunContext, fraction: float, seed: int, holdout: str | None, external: bool):
    """Produce splits/train.jsonl and splits/test.jsonl."""
    if external and holdout:
        raise ConfigError("--external and --holdout are mutually exclusive")
    with run_lock(ctx.run_dir):
        source = require_artifact(ctx.path("corpus.jsonl"), "ingest")
        records = load_records(source)
        if holdout:
            train, test = holdout_cell_line(records, holdout)
            stage_config = {"mode": "holdout", "holdout": holdout}
        elif external:
            unassigned = sum(1 for r in records if r.split is Split.UNASSIGNED)
            if unassigned:
                raise CorpusError(
                    f"--external requires every record to carry a split; {unassigned} lack one"
                )
            train = [r for r in records if r.split is Split.TRAIN]
            test = [r for r in records if r.split is Split.TEST]
            stage_config = {"mode": "external"}
        else:
            assigned = assign_split(records, fraction, seed)
            train = [r for r in assigned if r.split is Split.TRAIN]
            test = [r for r in assigned if r.split is Split.TEST]
            stage_config = {"mode": "fraction", "fraction": fraction, "seed": seed}
        header = stage_header(ctx, "split", stage_config, {"corpus": source})
        write_records(ctx.path("splits", "train.jsonl"), train, {**header, "role": "train"})
        write_records(ctx.path("splits", "test.jsonl"), test, {**header, "role": "test"})
        click.echo(f"split: {len(train)} train / {len(test)} test records")


@cli.command("generate")
@click.option("--approach", type=click.Choice(["1", "2"]), required=True)
@click.option("--generator-model", type=str, default=None)
@click.option("--critic-model", type=str, default=None)
@click.option("--records", "records_path", type=click.Path(path_type=Path, exists=True),
              default=None, help="Defaults to splits/train.jsonl.")
@click.option("--subset-fraction", type=float, default=None,
              help="Generate for a seeded random subset of the records.")
@click.option("--subset-seed", type=int, default=0, show_default=True)
@click.option("--temperature", type=float, default=None)
@click.option("--max-tokens", type=int, default=2048, show_default=True)
@click.option("--resample-unparseable", type=int, default=0, show_default=True,
              help="Extra attempts when an output fails strict parsing.")
@click.option("--backend", type=click.Choice(["http", "mock"]), default="http", show_default=True)
@click.option("--fixture", type=click.Path(path_type=Path, exists=True), default=None)
@click.option("--base-url", type=str, default=None)
@click.option("--api-key-env", type=str, default=None)
@click.option("--max-in-flight", type=int, default=None)
@click.option("--retry-budget", type=int, default=None)
@click.option("--requests-per-minute", type=float, default=None)
@click.pass_obj
def cmd_generate(ctx: RunContext, approach, generator_model, critic_model, records_path,
                 subset_fraction, subset_seed, temperature, max_tokens, resample_unparseable,
                 backend, fixture, base_url, api_key_env, max_in_flight, retry_budget,
                 requests_per_minute):
    """Generate reasoning traces (approach 1 or 2) over the training records."""
    with run_lock(ctx.run_dir):
        source = records_path or require_artifact(ctx.path("splits", "train.jsonl"), "split")
        records = load_records(source)
        generator_model = resolve(generator_model, ctx.cfg("models", "generator"),
                                  os.environ.get("PERTCOT_GENERATOR_MODEL"),
                                  required="generator model")
        if subset_fraction is not None:
            if not 0.0 < subset_fraction <= 1.0:
                raise ConfigError("--subset-fraction must be in (0, 1]")
            count = max(1, round(subset_fraction * len(records)))
            rng = random.Random(subset_seed)
            keep = sorted(rng.sample(range(len(records)), count))
            records = [records[i] for i in keep]
        gateway, gateway_settings = build_backend_gateway(
            ctx, backend, fixture, base_url, api_key_env,
            max_in_flight, retry_budget, requests_per_minute)
        temperature_value = resolve(temperature, ctx.cfg("sampling", "generation_temperature"),
                                    default=1.0)
        stage_config = {
            "approach": approach,
            "generator_model": generator_model,
            "critic_model": critic_model,
            "records": str(source),
            "subset_fraction": subset_fraction,
            "subset_seed": subset_seed,
            "temperature": temperature_value,
            "max_tokens": max_tokens,
            "resample_unparseable": resample_unparseable,
            "gateway": gateway_settings,
        }
        if approach == "1":
            traces = generate_approach1(records, gateway, generator_model,
                                        temperature=temperature_value,
                                        max_output_tokens=max_tokens,
                                        resample_unparseable=resample_unparseable,
                                        on_progress=progress_printer("generate"))
        else:
            critic_model = resolve(critic_model, ctx.cfg("models", "critic"),
                                   os.environ.get("PERTCOT_CRITIC_MODEL"),
                                   required="critic model")
            stage_config["critic_model"] = critic_model
            traces = generate_approach2(records, gateway, generator_model, critic_model,
                                        temperature=temperature_value,
                                        max_output_tokens=max_tokens,
                                        resample_unparseable=resample_unparseable,
                                        on_progress=progress_printer("generate"))
        header = stage_header(ctx, "traces", stage_config, {"records": source})
        out = ctx.path("traces", "traces.jsonl")
        write_trace_log(traces, out, header=header)
        retained = [t for t in traces if t.retained]
        by_label = {
            label.serialized: sum(1 for t in retained if t.record.label is label)
            for label in Label
        }
        click.echo(f"generated {len(traces)} traces, retained {len(retained)} -> {out}")
        click.echo(f"retained by label: {json.dumps(by_label)}")


@cli.command("export")
@click.option("--baseline", is_flag=True, help="Answer-only targets from the train split.")
@click.option("--traces", "traces_path", type=click.Path(path_type=Path, exists=True), default=None)
@click.option("--records", "records_path", type=click.Path(path_type=Path, exists=True), default=None)
@click.option("--include-unretained", is_flag=True)
@click.option("--rebalance", "rebalance_flag", is_flag=True,
              help="Downsample so each class is exactly a third of the export.")
@click.option("--rebalance-seed", type=int, default=0, show_default=True)
@click.pass_obj
def cmd_export(ctx: RunContext, baseline, traces_path, records_path, include_unretained,
               rebalance_flag, rebalance_seed):
    """Export the fine-tuning corpus (and its training manifest)."""
    with run_lock(ctx.run_dir):
        if baseline:
            source = records_path or require_artifact(ctx.path("splits", "train.jsonl"), "split")
            records = load_records(source)
            if rebalance_flag:
                records = rebalance(records, rebalance_seed)
            examples = build_baseline_examples(records)
            manifest_records = records
            out = ctx.path("sft", "baseline.jsonl")
            stage_config = {"mode": "baseline", "records": str(source),
                            "rebalance": rebalance_flag, "rebalance_seed": rebalance_seed}
            inputs = {"records": source}
        else:
            source = traces_path or require_artifact(ctx.path("traces", "traces.jsonl"), "generate")
            traces = [ReasoningTrace.from_row(row) for row in read_jsonl(source)]
            kept = [t for t in traces if t.retained or include_unretained]
            if rebalance_flag:
                labels = [t.record.label for t in kept]
                keep_indices = balanced_sample_indices(labels, rebalance_seed)
                kept = [kept[i] for i in keep_indices]
            examples = build_sft_examples(kept, only_retained=not include_unretained)
            manifest_records = [t.record for t in kept]
            out = ctx.path("sft", "corpus.jsonl")
            stage_config = {"mode": "traces", "traces": str(source),
                            "include_unretained": include_unretained,
                            "rebalance": rebalance_flag, "rebalance_seed": rebalance_seed}
            inputs = {"traces": source}
        header = stage_header(ctx, "sft", stage_config, inputs)
        write_jsonl(out, (e.to_row() for e in examples), header=header)
        manifest = {
            "_provenance": header,
            "keys": sorted(r.key_str() for r in manifest_records),
        }
        atomic_write_text(ctx.path("sft", "train_manifest.json"),
                          json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        click.echo(f"exported {len(examples)} examples -> {out}")


@cli.command("predict")
@click.option("--protocol", type=click.Choice(sorted(PROTOCOL_BY_FLAG)), default="standard",
              show_default=True)
@click.option("--model", type=str, default=None)
@click.option("--records", "records_path", type=click.Path(path_type=Path, exists=True),
              default=None, help="Defaults to splits/test.jsonl.")
@click.option("--train-manifest", type=click.Path(path_type=Path, exists=True), default=None,
              help="Defaults to sft/train_manifest.json when present.")
@click.option("--no-leakage-check", is_flag=True)
@click.option("--max-tokens", type=int, default=2048, show_default=True)
@click.option("--backend", type=click.Choice(["http", "mock"]), default="http", show_default=True)
@click.option("--fixture", type=click.Path(path_type=Path, exists=True), default=None)
@click.option("--base-url", type=str, default=None)
@click.option("--api-key-env", type=str, default=None)
@click.option("--max-in-flight", type=int, default=None)
@click.option("--retry-budget", type=int, default=None)
@click.option("--requests-per-minute", type=float, default=None)
@click.pass_obj
def cmd_predict(ctx: RunContext, protocol, model, records_path, train_manifest,
                no_leakage_check, max_tokens, backend, fixture, base_url, api_key_env,
                max_in_flight, retry_budget, requests_per_minute):
    """Run the student model over the test records and store raw predictions."""
    with run_lock(ctx.run_dir):
        source = records_path or require_artifact(ctx.path("splits", "test.jsonl"), "split")
        records = load_records(source)
        model = resolve(model, ctx.cfg("models", "student"),
                        os.environ.get("PERTCOT_STUDENT_MODEL"), required="student model")
        manifest_keys = None
        manifest_path = train_manifest
        if manifest_path is None:
            candidate = ctx.path("sft", "train_manifest.json")
            manifest_path = candidate if candidate.exists() else None
        if manifest_path is not None and not no_leakage_check:
            manifest_keys = set(json.loads(Path(manifest_path).read_text())["keys"])
        gateway, gateway_settings = build_backend_gateway(
            ctx, backend, fixture, base_url, api_key_env,
            max_in_flight, retry_budget, requests_per_minute)
        protocol_value = PROTOCOL_BY_FLAG[protocol]
        stage_config = {
            "protocol": protocol_value.value,
            "model": model,
            "records": str(source),
            "train_manifest": str(manifest_path) if manifest_path else None,
            "max_tokens": max_tokens,
            "gateway": gateway_settings,
        }
        predictions = run_predictions(records, gateway, model, protocol_value,
                                      train_manifest_keys=manifest_keys,
                                      max_output_tokens=max_tokens,
                                      on_progress=progress_printer("predict"))
        header = stage_header(ctx, "predictions", stage_config, {"records": source})
        out = ctx.path("predictions", f"{protocol_value.value}.jsonl")
        write_predictions(predictions, out, header=header)
        invalid = sum(1 for p in predictions if p.invalid)
        click.echo(f"predicted {len(predictions)} records ({invalid} invalid) -> {out}")


@cli.command("evaluate")
@click.option("--predictions", "predictions_path", type=click.Path(path_type=Path, exists=True),
              default=None, help="Defaults to predictions/standard.jsonl.")
@click.pass_obj
def cmd_evaluate(ctx: RunContext, predictions_path: Path | None):
    """Score a predictions file into a machine-readable report."""
    with run_lock(ctx.run_dir):
        source = predictions_path or require_artifact(
            ctx.path("predictions", "standard.jsonl"), "predict")
        predictions = [Prediction.from_row(row) for row in read_jsonl(source)]
        report = build_report(predictions)
        stage_config = {"predictions": str(source)}
        header = stage_header(ctx, "report", stage_config, {"predictions": source})
        out = ctx.path("reports", f"eval_{report.protocol.value}.json")
        payload = {"_provenance": header, **report.to_dict()}
        atomic_write_text(out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        table_path = ctx.path("reports", f"eval_{report.protocol.value}.txt")
        atomic_write_text(table_path,
                          "# " + canonical_json(header) + "\n" + render_report_table(report))
        click.echo(f"report -> {out}")


@cli.command("report")
@click.option("--report", "report_path", type=click.Path(path_type=Path, exists=True),
              default=None, help="Defaults to reports/eval_standard.json.")
@click.option("--compare", "compare_path", type=click.Path(path_type=Path, exists=True),
              default=None, help="JSON file of cited comparison rows to append.")
@click.pass_obj
def cmd_report(ctx: RunContext, report_path: Path | None, compare_path: Path | None):
    """Render a stored report as the human-readable table."""
    with run_lock(ctx.run_dir):
        source = report_path or require_artifact(
            ctx.path("reports", "eval_standard.json"), "evaluate")
        report = load_report(source)
        text = render_report_table(report)
        if compare_path is not None:
            cited = json.loads(Path(compare_path).read_text(encoding="utf-8"))
            lines = ["", "comparison rows (cited, not recomputed):"]
            for row in cited.get("rows", []):
                values = "  ".join(f"{k}={v}" for k, v in sorted(row.get("values", {}).items()))
                lines.append(f"  {row.get('model', '?')}: {values}")
            text += "\n".join(lines) + "\n"
        click.echo(text, nl=False)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except (ConfigError, GatewayAuthError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except CorpusError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except GatewayError as exc:
        click.echo(f"network error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
