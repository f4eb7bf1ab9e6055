"""
Command Line Interface
======================

Subcommands for each stage of the pipeline:

    python -m anomaly_scanner mock-serve --profile profile.json --port 8765
    python -m anomaly_scanner --endpoint http://127.0.0.1:8765/v1 scan --vocab cl100k_base.tiktoken --checkpoint scan.ndjson
    python -m anomaly_scanner confirm --vocab cl100k_base.tiktoken --scan-checkpoint scan.ndjson --checkpoint confirm.ndjson
    python -m anomaly_scanner report --vocab cl100k_base.tiktoken --scan-checkpoint scan.ndjson --confirm-checkpoint confirm.ndjson
    echo "atrigesimal" | python -m anomaly_scanner guard --vocab cl100k_base.tiktoken --blocklist report.json
    python -m anomaly_scanner explain --vocab cl100k_base.tiktoken --id 43587 -n 4
"""

import functools
import sys
from pathlib import Path
from typing import Optional, Tuple

import click
from loguru import logger

from .checkpoint import load_scan_checkpoint
from .config import ScannerSettings, load_settings
from .errors import AnomalyScannerError, GuardUnresolvableError
from .guard import load_blocklist, perturb
from .mock_llm import AnomalyProfile, serve
from .report import build_report
from .scan import candidates_from_records, probeable_ids, run_scan
from .triage import count_classifications, load_confirmation_checkpoint, run_confirmation
from .vocab import load_vocabulary

GUARD_UNRESOLVABLE_EXIT = 2

existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
output_file = click.Path(dir_okay=False, path_type=Path)


def configure_logging(level: str, log_file: Optional[Path] = None):
    logger.remove()
    logger.add(sys.stderr, level=level.upper(),
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}")
    if log_file:
        logger.add(str(log_file), level="DEBUG", rotation="50 MB")


def reports_errors(command):
    """Turn scanner errors into a one-line diagnostic and a nonzero exit."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except AnomalyScannerError as e:
            logger.error(str(e))
            raise click.ClickException(str(e)) from e
    return wrapper


def parse_range(value: Optional[str]) -> Optional[Tuple[int, int]]:
    """`lo..hi` -> (lo, hi), a half-open id interval."""
    if value is None:
        return None
    try:
        lo, hi = (int(part) for part in value.split('..', 1))
    except ValueError:
        raise click.BadParameter(f"expected lo..hi, got {value!r}", param_hint="--range") from None
    if lo < 0 or hi < lo:
        raise click.BadParameter(f"empty or negative range {value!r}", param_hint="--range")
    return lo, hi


@click.group()
@click.option('--endpoint', help="Chat-completions base URL.")
@click.option('--model', help="Model identifier.")
@click.option('--price-prompt', type=float, help="Price per 1k prompt tokens.")
@click.option('--price-completion', type=float, help="Price per 1k completion tokens.")
@click.option('--config', 'config_path', type=existing_file, help="YAML settings file.")
@click.option('--log-level', default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option('--log-file', type=output_file, help="Also log (at DEBUG) to this file.")
@click.pass_context
@reports_errors
def main(ctx, endpoint, model, price_prompt, price_completion, config_path, log_level, log_file):
    """Anomalous token scanner for chat-completion models."""
    configure_logging(log_level, log_file)
    ctx.obj = load_settings(config_path, endpoint=endpoint, model=model,
                            price_prompt=price_prompt, price_completion=price_completion)


@main.command()
@click.option('--vocab', 'vocab_path', required=True, type=existing_file)
@click.option('--checkpoint', 'checkpoint_path', required=True, type=output_file)
@click.option('--range', 'id_range', help="Half-open token id range lo..hi.")
@click.option('--rate', type=int, help="Requests per minute.")
@click.option('--concurrency', type=click.IntRange(min=1))
@click.option('--fresh', is_flag=True, help="Discard an existing checkpoint instead of resuming it.")
@click.pass_obj
@reports_errors
def scan(settings: ScannerSettings, vocab_path, checkpoint_path, id_range, rate, concurrency, fresh):
    """REPEAT-probe every token and record confidence metrics."""
    settings = settings.with_overrides(rate_per_minute=rate, concurrency=concurrency)
    vocab = load_vocabulary(vocab_path)
    cfg = settings.scan_config(checkpoint_path, parse_range(id_range))

    if fresh and checkpoint_path.exists():
        logger.warning(f"Discarding existing checkpoint {checkpoint_path}")
        checkpoint_path.unlink()
    resume = load_scan_checkpoint(checkpoint_path, repair=True)

    with settings.make_client() as client:
        result = run_scan(vocab, cfg, client, resume=resume)
        ledger = client.ledger.snapshot()

    click.echo(f"scanned {result.total_scanned}  candidates {len(result.candidates)}  "
               f"skipped {len(result.skipped)}  cost {ledger['total']}")


@main.command()
@click.option('--vocab', 'vocab_path', required=True, type=existing_file)
@click.option('--scan-checkpoint', 'scan_path', required=True, type=existing_file)
@click.option('--checkpoint', 'checkpoint_path', required=True, type=output_file)
@click.option('--samples', type=click.IntRange(min=1), help="Confirmation probes per candidate.")
@click.option('--temperature', type=click.FloatRange(0.0, 2.0))
@click.option('--concurrency', type=click.IntRange(min=1))
@click.pass_obj
@reports_errors
def confirm(settings: ScannerSettings, vocab_path, scan_path, checkpoint_path, samples, temperature, concurrency):
    """Re-probe scan candidates and classify them."""
    settings = settings.with_overrides(confirm_samples=samples, confirm_temperature=temperature,
                                       concurrency=concurrency)
    vocab = load_vocabulary(vocab_path)
    scan_checkpoint = load_scan_checkpoint(scan_path)
    if scan_checkpoint is None:
        raise click.ClickException(f"{scan_path} holds no scan")

    missing = set(probeable_ids(vocab, scan_checkpoint.token_range)) - set(scan_checkpoint.records)
    if missing:
        raise click.ClickException(f"scan is incomplete ({len(missing)} tokens left); finish it first")

    thresholds = scan_checkpoint.thresholds(settings.thresholds())
    candidates = candidates_from_records(scan_checkpoint.records.values(), vocab, thresholds)

    with settings.make_client() as client:
        records = run_confirmation(candidates, client, config=settings.confirm_config(checkpoint_path))
        ledger = client.ledger.snapshot()

    counts = count_classifications(records)
    click.echo("  ".join(f"{name} {count}" for name, count in counts.items()) + f"  cost {ledger['total']}")


@main.command()
@click.option('--vocab', 'vocab_path', required=True, type=existing_file)
@click.option('--scan-checkpoint', 'scan_path', required=True, type=existing_file)
@click.option('--confirm-checkpoint', 'confirm_path', required=True, type=existing_file)
@click.option('--json', 'json_path', default="report.json", show_default=True, type=output_file)
@click.option('--csv', 'csv_path', default="report.csv", show_default=True, type=output_file)
@click.pass_obj
@reports_errors
def report(settings: ScannerSettings, vocab_path, scan_path, confirm_path, json_path, csv_path):
    """Merge checkpoints into report.json and report.csv."""
    vocab = load_vocabulary(vocab_path)
    result = build_report(
        vocab,
        load_scan_checkpoint(scan_path),
        load_confirmation_checkpoint(confirm_path, repair=False),
        prices=settings.price_table(),
    )
    result.write(json_path, csv_path)

    summary = result.summary
    click.echo(f"major {summary['major']} (+{summary['no_result']} no-result)  minor {summary['minor']}  "
               f"false positives {summary['false_positive']} ({summary['false_match']} false matches)  "
               f"cost {result.ledger['total']['cost']}")


@main.command()
@click.option('--vocab', 'vocab_path', required=True, type=existing_file)
@click.option('--blocklist', 'blocklist_path', required=True, type=existing_file,
              help="report.json (major and no-result ids) or a file of ids.")
@click.pass_context
def guard(ctx, vocab_path, blocklist_path):
    """Perturb standard input so no blocklisted token survives."""
    try:
        vocab = load_vocabulary(vocab_path)
        blocklist = load_blocklist(blocklist_path, vocab)
        # \r\n must reach the encoder untranslated
        text = click.get_binary_stream('stdin').read().decode("utf-8")
        result = perturb(text, vocab, blocklist)
    except UnicodeDecodeError as e:
        raise click.ClickException(f"standard input is not valid UTF-8: {e}") from None
    except GuardUnresolvableError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(GUARD_UNRESOLVABLE_EXIT)
    except AnomalyScannerError as e:
        raise click.ClickException(str(e)) from e

    if result.changed:
        logger.info(f"Inserted {len(result.inserted_positions)} spaces")
    stdout = click.get_binary_stream('stdout')
    stdout.write(result.text.encode("utf-8"))
    stdout.flush()


@main.command()
@click.option('--vocab', 'vocab_path', type=existing_file, help="Needed with --id.")
@click.option('--id', 'token_id', type=int, help="Token id to explain.")
@click.option('--text', 'token_text', help="Literal token string to explain.")
@click.option('-n', '--samples', default=4, show_default=True, type=click.IntRange(min=1))
@click.option('--temperature', default=0.3, show_default=True, type=click.FloatRange(0.0, 2.0))
@click.pass_obj
@reports_errors
def explain(settings: ScannerSettings, vocab_path, token_id, token_text, samples, temperature):
    """Run the EXPLAIN prompt several times and print the raw completions."""
    if (token_id is None) == (token_text is None):
        raise click.UsageError("give exactly one of --id or --text")
    if token_id is not None:
        if vocab_path is None:
            raise click.UsageError("--id needs --vocab")
        entry = load_vocabulary(vocab_path).get(token_id)
        if entry.decoded is None:
            raise click.ClickException(f"token {token_id} is not valid UTF-8 and cannot be sent")
        token_text = entry.decoded

    texts = []
    with settings.make_client() as client:
        for i in range(samples):
            result = client.explain_probe(token_text, temperature=temperature)
            texts.append(result.text_field)
            click.echo(f"[{i + 1}] json_ok={result.json_ok} echo_match={result.echo_match} "
                       f"{result.completion_text!r}")

    distinct = {t for t in texts if t is not None}
    click.echo(f"{len(distinct)} distinct text fields over {samples} samples")


@main.command('mock-serve')
@click.option('--profile', 'profile_path', type=existing_file, help="JSON behavior profile.")
@click.option('--host', default="127.0.0.1", show_default=True)
@click.option('--port', default=8765, show_default=True, type=int)
@click.option('--seed', type=int, help="Overrides the profile's seed.")
@click.option('--delay', default=0.0, show_default=True, type=click.FloatRange(min=0.0),
              help="Fixed delay per request, in seconds.")
@reports_errors
def mock_serve(profile_path, host, port, seed, delay):
    """Serve a deterministic mock chat-completions endpoint until interrupted."""
    if profile_path:
        profile = AnomalyProfile.from_file(profile_path, seed=seed)
    else:
        profile = AnomalyProfile(seed=seed or 0)

    handle = serve(profile, host=host, port=port, delay=delay)
    click.echo(f"serving {handle.url}")
    try:
        handle.wait()
    except KeyboardInterrupt:
        pass
    finally:
        handle.shutdown()
        logger.info(f"Mock ledger: {handle.ledger()}")


if __name__ == "__main__":
    main()
