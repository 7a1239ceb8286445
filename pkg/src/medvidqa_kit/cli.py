"""Command-line interface for medvidqa-kit."""

from __future__ import annotations

import json
import logging
import sys
from importlib.resources import files
from pathlib import Path
from typing import Any, Callable

import click

from . import __version__
from .config import (
    DEFAULT_RULES,
    PROJECT_CONFIG_PATH,
    RULE_DESCRIPTIONS,
    USER_CONFIG_PATH,
    PipelineConfig,
    load_config,
    validate_config as validate_config_file,
)
from .corpus import load_gold_steps, load_qrels, read_json_file, step_sets_from_json
from .errors import EXIT_CONFIG, MedVidQAError
from .metrics import evaluate_retrieval, evaluate_steps, format_caption_report, format_retrieval_report
from .pipeline import REPORT_TEXT, StageResult, execute
from .retrieval import STRATEGIES, STRATEGY_ALIASES, read_run_file

logger = logging.getLogger(__name__)

EXAMPLE_CONFIG = 'medvidqa-kit.toml.example'
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class ExitCodeGroup(click.Group):
    """Click group that maps failures to the toolkit's exit codes.

    Usage errors exit 1 (click would use 2, which is reserved for data errors).
    """

    def main(self, *args: Any, **kwargs: Any) -> Any:
        kwargs['standalone_mode'] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_CONFIG)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_CONFIG)
        except MedVidQAError as e:
            click.secho(f"Error: {e}", fg='red', err=True)
            sys.exit(e.exit_code)
        except Exception as e:
            logger.debug("Unexpected error", exc_info=True)
            click.secho(f"Unexpected error: {e}", fg='red', err=True)
            sys.exit(EXIT_CONFIG)
        sys.exit(rv if isinstance(rv, int) else 0)


def pipeline_options(f: Callable) -> Callable:
    """Flags that override config file values, shared by every stage command."""
    options = [
        click.option(
            '--strategy',
            type=click.Choice(sorted([*STRATEGIES, *STRATEGY_ALIASES])),
            help='Retrieval strategy (run1 ... run5 or the full name)',
        ),
        click.option('-k', 'k', type=click.IntRange(min=1), help='Ranking cutoff'),
        click.option('--theta', type=click.FloatRange(0.0, 1.0), help='IoU gate threshold for localization'),
        click.option('--stub', is_flag=True, help='Run offline against stub services and fixtures'),
        click.option('--workers', type=click.IntRange(min=1), help='Parallel workers per stage'),
        click.option('--ndcg-cutoff', type=click.IntRange(min=1), help='Rank cutoff for nDCG (default: full run)'),
        click.option('--output-dir', type=click.Path(path_type=Path), help='Artifact directory'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _load(ctx: click.Context, strategy: str | None = None, k: int | None = None,
          theta: float | None = None, stub: bool = False, workers: int | None = None,
          ndcg_cutoff: int | None = None, output_dir: Path | None = None) -> PipelineConfig:
    overrides: dict[str, dict[str, Any]] = {'retrieval': {}, 'localization': {}, 'pipeline': {}, 'paths': {}}
    if strategy:
        overrides['retrieval']['strategy'] = strategy
    if k is not None:
        overrides['retrieval']['k'] = k
    if theta is not None:
        overrides['localization']['theta'] = theta
    if stub:
        overrides['pipeline']['stub'] = True
    if workers is not None:
        overrides['pipeline']['workers'] = workers
    if ndcg_cutoff is not None:
        overrides['pipeline']['ndcg_cutoff'] = ndcg_cutoff
    if output_dir is not None:
        overrides['paths']['output_dir'] = str(output_dir)
    return load_config(ctx.obj['config_path'], overrides)


def _report_stages(results: list[StageResult]) -> None:
    for result in results:
        if result.skipped:
            click.secho(f"- {result.name}: up to date", fg='yellow')
        else:
            click.secho(f"✓ {result.name} ({result.seconds:.2f}s)", fg='green')
        for path in result.outputs:
            click.echo(f"    {path}")


def _run_stage(ctx: click.Context, command: str, **flags: Any) -> PipelineConfig:
    config = _load(ctx, **flags)
    _report_stages(execute(command, config))
    return config


@click.group(cls=ExitCodeGroup)
@click.version_option(version=__version__, prog_name='mvqa')
@click.option(
    '--config', '-c',
    'config_path',
    type=click.Path(path_type=Path),
    help='Path to custom config file',
)
@click.option('--verbose', '-v', is_flag=True, help='Log debug details to stderr')
@click.pass_context
def cli(ctx: click.Context, config_path: Path | None, verbose: bool):
    """Medical video question answering: retrieval, answer localization,
    step captioning and evaluation.

    Examples:

      \b
      # Run every stage offline on a corpus
      mvqa --config medvidqa-kit.toml pipeline --stub

      \b
      # Rank videos with the mean-over-encoders strategy, top 100
      mvqa retrieve --strategy run4 -k 100

      \b
      # Evaluate an existing run file
      mvqa eval-retrieval --run runs/run1.txt --qrels qrels.txt
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format=LOG_FORMAT, stream=sys.stderr)
    ctx.ensure_object(dict)
    ctx.obj['config_path'] = config_path


@cli.command()
@pipeline_options
@click.pass_context
def ingest(ctx: click.Context, **flags: Any):
    """Parse transcripts, captions and frame features into the corpus artifact."""
    _run_stage(ctx, 'ingest', **flags)


@cli.command(name='retrieve')
@pipeline_options
@click.pass_context
def retrieve_command(ctx: click.Context, **flags: Any):
    """Rank videos for every topic and write a trec run file."""
    _run_stage(ctx, 'retrieve', **flags)


@cli.command()
@pipeline_options
@click.pass_context
def localize(ctx: click.Context, **flags: Any):
    """Localize answer spans in the top retrieved videos."""
    _run_stage(ctx, 'localize', **flags)


@cli.command()
@pipeline_options
@click.pass_context
def stepcap(ctx: click.Context, **flags: Any):
    """Generate query-focused step captions."""
    _run_stage(ctx, 'stepcap', **flags)


@cli.command(name='eval-retrieval')
@pipeline_options
@click.option('--run', 'run_path', type=click.Path(path_type=Path, exists=True, dir_okay=False),
              help='Evaluate this run file instead of the pipeline artifact')
@click.option('--qrels', 'qrels_path', type=click.Path(path_type=Path, exists=True, dir_okay=False),
              help='Relevance judgments (default: [paths] qrels)')
@click.option('--json', 'as_json', is_flag=True, help='Print the report as JSON')
@click.pass_context
def eval_retrieval(ctx: click.Context, run_path: Path | None, qrels_path: Path | None, as_json: bool, **flags: Any):
    """Compute MAP, R@5/10, P@5/10 and nDCG."""
    if run_path is None:
        config = _run_stage(ctx, 'eval-retrieval', **flags)
        click.echo((Path(config.output_dir) / 'eval-retrieval' / REPORT_TEXT).read_text(encoding='utf-8'), nl=False)
        return
    config = _load(ctx, **flags)
    report = evaluate_retrieval(
        read_run_file(run_path),
        load_qrels(qrels_path or config.require('qrels_path')),
        config.ndcg_cutoff,
    )
    click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True) if as_json else format_retrieval_report(report))


@cli.command(name='eval-steps')
@pipeline_options
@click.option('--steps', 'steps_path', type=click.Path(path_type=Path, exists=True, dir_okay=False),
              help='Evaluate this step file instead of the pipeline artifact')
@click.option('--gold', 'gold_path', type=click.Path(path_type=Path, exists=True, dir_okay=False),
              help='Gold steps (default: [paths] gold_steps)')
@click.option('--json', 'as_json', is_flag=True, help='Print the report as JSON')
@click.pass_context
def eval_steps(ctx: click.Context, steps_path: Path | None, gold_path: Path | None, as_json: bool, **flags: Any):
    """Compute step caption precision, recall, F-score, IoU@0.3/0.5/0.7 and mIoU."""
    if steps_path is None:
        config = _run_stage(ctx, 'eval-steps', **flags)
        click.echo((Path(config.output_dir) / 'eval-steps' / REPORT_TEXT).read_text(encoding='utf-8'), nl=False)
        return
    config = _load(ctx, **flags)
    pred = step_sets_from_json(read_json_file(steps_path, "steps"), steps_path)
    report = evaluate_steps(pred, load_gold_steps(gold_path or config.require('gold_steps_path')))
    click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True) if as_json else format_caption_report(report))


@cli.command(name='pipeline')
@pipeline_options
@click.pass_context
def pipeline_command(ctx: click.Context, **flags: Any):
    """Run every stage in order, reusing up-to-date artifacts."""
    config = _run_stage(ctx, 'pipeline', **flags)
    click.echo(f"Summary: {Path(config.output_dir) / 'summary.json'}")


@cli.command(name='validate-config')
@click.argument('path', type=click.Path(path_type=Path))
@click.pass_context
def validate_config(ctx: click.Context, path: Path):
    """Validate a configuration file and exit."""
    result = validate_config_file(path)
    click.echo(result.format_report())
    ctx.exit(0 if result.is_valid else EXIT_CONFIG)


@cli.command(name='show-config')
@pipeline_options
@click.pass_context
def show_config(ctx: click.Context, **flags: Any):
    """Show the effective configuration and exit."""
    config = _load(ctx, **flags)

    click.secho("Effective Configuration:", bold=True)
    click.echo()
    click.echo("Config Source:")
    if config.sources:
        for source in config.sources:
            click.echo(f"  {source}")
    else:
        click.echo("  Defaults (no config file)")
    click.echo()

    click.secho("Paths:", bold=True)
    for label, value in (
        ('corpus_dir', config.corpus_dir),
        ('topics', config.topics_path),
        ('qrels', config.qrels_path),
        ('gold_steps', config.gold_steps_path),
        ('output_dir', config.output_dir),
        ('fixtures_dir', config.fixtures_dir),
    ):
        click.echo(f"  {label}: {value if value is not None else '(not set)'}")
    click.echo()

    s = config.strategy
    click.secho("Retrieval:", bold=True)
    click.echo(f"  strategy: {s.strategy} (tag {s.run_tag}), k={s.k}")
    click.echo(f"  encoders: {', '.join(s.encoders)}; vision: {s.vision_encoder}")
    click.echo(f"  chunks: {s.chunk_tokens} tokens, stride {s.chunk_stride}; rrf_k={s.rrf_k}")
    click.echo(f"  expansion_mode: {s.expansion_mode}")
    click.echo()

    loc = config.localization
    click.secho("Localization:", bold=True)
    click.echo(f"  theta={loc.theta} window={loc.window} tau={loc.tau} top_videos={loc.top_videos}")
    click.echo()

    click.secho("Services:", bold=True)
    for name, service in (('embedding', config.embedding), ('chat', config.chat)):
        target = service.endpoint or '(no endpoint)'
        click.echo(f"  {name}: {service.backend} {service.model or ''} {target if service.backend == 'http' else ''}")
        click.echo(f"    retries={service.max_retries} parallel={service.max_parallel} cache={service.cache_dir}")
    click.echo()

    click.secho("Pipeline:", bold=True)
    click.echo(f"  stub={config.stub_mode} seed={config.seed} workers={config.workers} "
               f"ndcg_cutoff={config.ndcg_cutoff or 'full run'}")
    click.echo()

    click.secho("Cleaning Rules:", bold=True)
    for rule_name, enabled in sorted(config.cleaning.rules.items()):
        status = "✓" if enabled else "✗"
        color = "green" if enabled else "red"
        click.secho(f"  {status} {rule_name}: {enabled}", fg=color)


def _example_config() -> str:
    return (files('medvidqa_kit') / EXAMPLE_CONFIG).read_text(encoding='utf-8')


@cli.command(name='init-config')
@click.option('--global', 'config_global', is_flag=True, help='Create the user config (~/.config/)')
@click.option('--force', is_flag=True, help='Overwrite an existing config')
@click.pass_context
def init_config(ctx: click.Context, config_global: bool, force: bool):
    """Create a config file from the example template."""
    if config_global:
        target = USER_CONFIG_PATH
        location_name = "global config"
    else:
        target = Path.cwd() / PROJECT_CONFIG_PATH
        location_name = "project config"

    if target.exists() and not force:
        click.secho(f"Error: {location_name} already exists at {target}", fg='red', err=True)
        click.echo("Use --force to overwrite", err=True)
        ctx.exit(EXIT_CONFIG)

    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(_example_config(), encoding='utf-8')
    click.secho(f"✓ Created {location_name}: {target}", fg='green')
    click.echo()
    click.echo("Next steps:")
    click.echo(f"  1. Edit the config: {target}")
    click.echo(f"  2. Validate it: mvqa validate-config {target}")
    click.echo("  3. Test it: mvqa show-config")


@cli.command(name='show-config-example')
def show_config_example():
    """Print the example config to stdout."""
    click.echo(_example_config(), nl=False)


@cli.command(name='list-rules')
def list_rules():
    """List the transcript cleaning rules."""
    click.secho("Available Cleaning Rules:", bold=True)
    click.echo()
    for rule_name, default_value in DEFAULT_RULES.items():
        status = "✓ ON " if default_value else "✗ OFF"
        color = "green" if default_value else "red"
        click.echo(f"  {click.style(status, fg=color)} {click.style(rule_name, bold=True)}")
        click.echo(f"      {RULE_DESCRIPTIONS.get(rule_name, 'No description available')}")
    click.echo()
    click.echo("Usage:")
    click.echo("  • Enable/disable in config file: [cleaning] section")
    click.echo("  • View current config: mvqa show-config")


@cli.command()
@click.pass_context
def where(ctx: click.Context):
    """Show config file locations (priority order) and exit."""
    config_path = ctx.obj['config_path']
    project_config = Path.cwd() / PROJECT_CONFIG_PATH
    locations = [
        ("Custom (--config)", config_path),
        ("Project", project_config),
        ("User", USER_CONFIG_PATH),
    ]
    click.secho("Config File Locations (priority order):", bold=True)
    click.echo()
    for priority, (label, path) in enumerate(locations, start=1):
        if path is None:
            click.echo(f"  {priority}. {label}: Not specified")
            click.echo(f"     {click.style('[NOT USED]', fg='yellow')}")
        else:
            exists = path.exists()
            status = click.style("[EXISTS] ✓", fg='green') if exists else click.style("[NOT FOUND]", fg='yellow')
            click.echo(f"  {priority}. {label}: {path}")
            click.echo(f"     {status}")
        click.echo()
    click.echo("  4. Defaults: Built-in settings")
    click.echo(f"     {click.style('[ALWAYS AVAILABLE]', fg='green')}")


def main() -> None:
    cli(prog_name='mvqa')


if __name__ == '__main__':
    main()
