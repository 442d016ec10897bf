import os
import sys
import time
import logging
import functools
from dataclasses import replace
from pathlib import Path

# Add the current directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import click
import numpy as np
import yaml

from config import Config
from core.detection.analysis import DEFAULT_BUDGETS, Budget, budget_sweep, budget_trend
from core.detection.baselines import KnnIndex, default_num_principal, fit_residual, knn_score, residual_score, residual_sweep
from core.detection.evaluator import ScoreSet, evaluate
from core.diffusion.likelihood import gaussian_score_oracle, log_likelihood_batch
from core.diffusion.trainer import fit
from core.io.formats import (
    RepresentationSet,
    ScoreRow,
    read_checkpoint,
    read_head,
    read_json,
    read_reps,
    read_scores,
    write_checkpoint,
    write_json,
    write_reps,
    write_scores,
)
from core.io.run_config import Method, load_run_config, parse_set_options
from core.toy import constants as toy_constants
from core.toy.synthetic import make_task
from core.toy.toy2d import ToyName, ode_sample, run_toy_benchmark, toy_net_config
from core.utils.errors import ConfigError, DataError, RdmError
from core.utils.helpers import ensure_output_path, get_file_hash

logger = logging.getLogger('rdm_ood')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(verbose=False):
    """Stream + file logging in the house format"""
    handlers = [logging.StreamHandler()]
    if Config.LOG_FILE:
        os.makedirs(os.path.dirname(Config.LOG_FILE) or '.', exist_ok=True)
        handlers.append(logging.FileHandler(Config.LOG_FILE))
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def handle_errors(func):
    """Map library errors to a one-line diagnostic and the matching exit code"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except RdmError as e:
            logger.debug(f"{type(e).__name__} in {func.__name__}", exc_info=True)
            click.secho(f"Error: {e}", fg='red', err=True)
            sys.exit(e.exit_code)
    return wrapper


def run_options(func):
    """Options shared by every command that resolves a run configuration"""
    options = [
        click.option('--config', 'config_path', type=click.Path(), help='key = value run config file'),
        click.option('--set', 'set_options', multiple=True, metavar='KEY=VALUE', help='Override a config key'),
        click.option('--seed', type=int, help='Root seed'),
        click.option('--sde', 'sde_kind', type=click.Choice(['ve', 'vp', 'subvp']), help='SDE family'),
        click.option('--force', is_flag=True, help='Overwrite existing outputs'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def resolve_config(config_path, set_options, seed, sde_kind=None, extra=None):
    overrides = parse_set_options(set_options)
    if sde_kind:
        overrides['sde.kind'] = sde_kind
    overrides.update(extra or {})
    return load_run_config(config_path, overrides, seed)


def report_path(output):
    return Path(f"{output}.json")


def config_path_or(given, cfg, key, flag):
    """Command-line path, else ``paths.<key>`` from the run config"""
    value = given or getattr(cfg.paths, key)
    if not value:
        raise ConfigError(f"Missing {flag} (or paths.{key} in the run config)")
    return value


def progress_enabled():
    return Config.ENABLE_PROGRESS


def _num_classes(labels):
    return int(np.max(labels)) + 1 if labels is not None and len(labels) else None


@click.group()
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
def cli(verbose):
    """Representation diffusion models for out-of-distribution detection"""
    setup_logging(verbose)


@cli.command('fit')
@click.option('--train', 'train_path', type=click.Path(), help='Training representations (REPZ) [paths.train]')
@click.option('--out', 'out_path', type=click.Path(), help='Checkpoint path (RDM1) [paths.output]')
@click.option('--method', type=click.Choice(['rdm', 'conrdm']), help='Unconditional or class-conditioned')
@run_options
@handle_errors
def fit_command(train_path, out_path, method, config_path, set_options, seed, sde_kind, force):
    """Train a score network on ID representations"""
    cfg = resolve_config(config_path, set_options, seed, sde_kind, {'method': method} if method else None)
    if cfg.method not in (Method.RDM, Method.CONRDM):
        raise ConfigError(f"fit trains rdm or conrdm models, not {cfg.method.value}")
    train_path = config_path_or(train_path, cfg, 'train', '--train')
    out_path = config_path_or(out_path, cfg, 'output', '--out')
    out_path = ensure_output_path(out_path, force)
    ensure_output_path(report_path(out_path), force)

    reps = read_reps(train_path)
    if cfg.conditional and reps.labels is None:
        raise ConfigError("conrdm training needs labels in the training representations")
    net_cfg = cfg.net_for(reps.dim, _num_classes(reps.labels))
    labels = reps.labels if cfg.conditional else None

    started = time.time()
    result = fit(reps.data, cfg.sde, net_cfg, cfg.train, labels=labels, progress=progress_enabled())
    elapsed = time.time() - started

    write_checkpoint(
        result.model, cfg.sde, result.normalizer, out_path,
        extra={'method': cfg.method.value, 'seed': cfg.seed, 'dataset_id': reps.dataset_id},
        force=True,
    )
    write_json({
        'config': cfg.to_dict(),
        'net': net_cfg.to_dict(),
        'dataset_id': reps.dataset_id,
        'n_train': reps.n,
        'loss_trace': result.loss_trace,
        'steps': result.steps,
        'seed': cfg.seed,
        'checkpoint_sha256': get_file_hash(out_path),
        'elapsed_seconds': round(elapsed, 3),
    }, report_path(out_path), force=True)
    click.secho(f"Checkpoint written to {out_path}", fg='green')


def _conditions(model, reps, labels_from, head_path):
    if not model.config.conditional:
        return None
    if labels_from == 'head' or (labels_from is None and reps.labels is None):
        if not head_path:
            raise ConfigError("Conditional scoring needs labels in the file or a classifier head (--head)")
        head = read_head(head_path)
        if head.W.shape[1] != reps.dim:
            raise DataError(f"Head expects D={head.W.shape[1]}, representations have D={reps.dim}")
        return np.atleast_1d(head.predict(reps.data))
    if reps.labels is None:
        raise ConfigError("--labels-from file but the representation file carries no labels")
    return reps.labels


@cli.command('logp')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(), help='Trained model (RDM1) [paths.checkpoint]')
@click.option('--reps', 'reps_path', type=click.Path(), help='Representations to score (REPZ) [paths.query]')
@click.option('--out', 'out_path', type=click.Path(), help='Scores CSV [paths.output]')
@click.option('--oracle', type=click.Choice(['gaussian']), help='Use the analytic unit-Gaussian score instead of a model')
@click.option('--head', 'head_path', type=click.Path(), help='Classifier head (HEAD) for conditional scoring [paths.head]')
@click.option('--labels-from', type=click.Choice(['file', 'head']), help='Where class conditions come from')
@run_options
@handle_errors
def logp_command(checkpoint_path, reps_path, out_path, oracle, head_path, labels_from,
                 config_path, set_options, seed, sde_kind, force):
    """Exact log-likelihood of every representation"""
    cfg = resolve_config(config_path, set_options, seed, sde_kind)
    reps_path = config_path_or(reps_path, cfg, 'query', '--reps')
    out_path = config_path_or(out_path, cfg, 'output', '--out')
    checkpoint_path = checkpoint_path or cfg.paths.checkpoint
    head_path = head_path or cfg.paths.head
    out_path = ensure_output_path(out_path, force)
    ensure_output_path(report_path(out_path), force)
    reps = read_reps(reps_path)

    if oracle:
        model, sde, normalizer, method, conditions = gaussian_score_oracle(cfg.sde), cfg.sde, None, 'oracle', None
    elif checkpoint_path:
        checkpoint = read_checkpoint(checkpoint_path)
        model, sde, normalizer = checkpoint.model, checkpoint.sde, checkpoint.normalizer
        conditions = _conditions(model, reps, labels_from, head_path)
        method = Method.CONRDM.value if model.config.conditional else Method.RDM.value
    else:
        raise ConfigError("logp needs --checkpoint or --oracle")

    started = time.time()
    records = log_likelihood_batch(model, sde, normalizer, reps.data, cfg.ode, labels=conditions, progress=progress_enabled())
    elapsed = max(time.time() - started, 1e-9)
    throughput = reps.n / elapsed
    logger.info(f"Scored {reps.n} representations in {elapsed:.2f}s ({throughput:.1f}/s)")

    shown = conditions if conditions is not None else reps.labels
    rows = [
        ScoreRow(index=i, logp_nats=r.logp, bpd=r.bpd, nfe=r.nfe, label=None if shown is None else int(shown[i]))
        for i, r in enumerate(records)
    ]
    write_scores(rows, out_path, force=True)
    failures = sum(not r.ok for r in records)
    write_json({
        'method': method,
        'dataset_id': reps.dataset_id,
        'n': reps.n,
        'failures': failures,
        'sde': sde.to_dict(),
        'ode': cfg.ode.to_dict(),
        'seed': cfg.seed,
        'throughput_per_second': round(throughput, 3),
        'config': cfg.to_dict(),
    }, report_path(out_path), force=True)
    if failures:
        click.secho(f"{failures} rows failed to integrate (see log)", fg='yellow')
    click.secho(f"Scores written to {out_path}", fg='green')


def _score_set(path, tag):
    rows = read_scores(path)
    sidecar = report_path(path)
    meta = read_json(sidecar) if sidecar.is_file() else {}
    return ScoreSet([r.logp_nats for r in rows], tag), meta


@cli.command('eval')
@click.option('--id', 'id_path', required=True, type=click.Path(), help='ID scores CSV')
@click.option('--ood', 'ood_path', required=True, type=click.Path(), help='OOD scores CSV')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Metrics JSON')
@click.option('--tpr', default=0.95, show_default=True, type=float)
@click.option('--method', type=click.Choice([m.value for m in Method]), help='Method tag for the report')
@click.option('--force', is_flag=True, help='Overwrite existing outputs')
@handle_errors
def eval_command(id_path, ood_path, out_path, tpr, method, force):
    """AUROC and FPR at the given TPR from two score files"""
    out_path = ensure_output_path(out_path, force)
    id_set, id_meta = _score_set(id_path, 'id')
    ood_set, ood_meta = _score_set(ood_path, 'ood')
    report = evaluate(id_set, ood_set, tpr=tpr)
    metrics = {
        'dataset_id': id_meta.get('dataset_id') or Path(id_path).stem,
        'dataset_ood': ood_meta.get('dataset_id') or Path(ood_path).stem,
        'method': method or id_meta.get('method', 'unknown'),
        'auroc_pct': report.auroc_pct,
        'fpr95_pct': report.fpr95_pct,
        'n_id': report.n_id,
        'n_ood': report.n_ood,
        'threshold': report.threshold,
    }
    write_json(metrics, out_path, force=True)
    click.echo(f"AUROC {report.auroc_pct:.2f}  FPR95 {report.fpr95_pct:.2f}")


@cli.command('baseline')
@click.option('--method', type=click.Choice(['knn', 'residual']), required=True)
@click.option('--train', 'train_path', type=click.Path(), help='ID training representations (REPZ) [paths.train]')
@click.option('--query', 'query_path', type=click.Path(), help='Representations to score (REPZ) [paths.query]')
@click.option('--out', 'out_path', type=click.Path(), help='Scores CSV [paths.output]')
@click.option('--k', type=int, help='Neighbor rank for knn')
@click.option('--raw-features', is_flag=True, help='Skip l2 normalization for knn')
@click.option('--num-principal', type=int, help='Principal units for residual')
@run_options
@handle_errors
def baseline_command(method, train_path, query_path, out_path, k, raw_features, num_principal,
                     config_path, set_options, seed, sde_kind, force):
    """Label-free KNN or Residual scores"""
    extra = {'method': method}
    if k is not None:
        extra['baseline.k'] = k
    if raw_features:
        extra['baseline.knn_normalize'] = 'false'
    if num_principal is not None:
        extra['baseline.num_principal'] = num_principal
    cfg = resolve_config(config_path, set_options, seed, sde_kind, extra)
    train_path = config_path_or(train_path, cfg, 'train', '--train')
    query_path = config_path_or(query_path, cfg, 'query', '--query')
    out_path = config_path_or(out_path, cfg, 'output', '--out')
    out_path = ensure_output_path(out_path, force)
    ensure_output_path(report_path(out_path), force)

    train = read_reps(train_path)
    query = read_reps(query_path)
    if train.dim != query.dim:
        raise DataError(f"Train D={train.dim} and query D={query.dim} differ")

    if cfg.method is Method.KNN:
        index = KnnIndex(train.data, k=cfg.baseline.k, normalize=cfg.baseline.knn_normalize)
        scores = np.atleast_1d(knn_score(index, query.data))
        params = {'k': cfg.baseline.k, 'normalize': cfg.baseline.knn_normalize}
    else:
        units = cfg.baseline.num_principal
        if units is None:
            units = default_num_principal(train.dim)
        scores = np.atleast_1d(residual_score(fit_residual(train.data, units), query.data))
        params = {'num_principal': units}

    rows = [
        ScoreRow(index=i, logp_nats=float(s), label=None if query.labels is None else int(query.labels[i]))
        for i, s in enumerate(scores)
    ]
    write_scores(rows, out_path, force=True)
    write_json({
        'method': cfg.method.value,
        'dataset_id': query.dataset_id,
        'train_dataset_id': train.dataset_id,
        'n': query.n,
        'params': params,
        'config': cfg.to_dict(),
    }, report_path(out_path), force=True)
    click.secho(f"{cfg.method.value} scores written to {out_path}", fg='green')


def _write_points(points, path):
    header = ','.join(f"x{i}" for i in range(points.shape[1]))
    np.savetxt(path, points, delimiter=',', header=header, comments='', fmt='%.17g')


@cli.command('toy2d')
@click.option('--dataset', required=True, type=click.Choice([n.value for n in ToyName]))
@click.option('--out-dir', required=True, type=click.Path(), help='Directory for samples and metrics')
@click.option('--iterations', default=toy_constants.TOY_ITERATIONS, show_default=True, type=int)
@click.option('--samples', 'n_samples', default=toy_constants.TOY_SAMPLES, show_default=True, type=int)
@click.option('--train-points', default=toy_constants.TOY_TRAIN_POINTS, show_default=True, type=int)
@click.option('--hidden-dim', default=toy_constants.TOY_HIDDEN_DIM, show_default=True, type=int)
@click.option('--num-blocks', default=toy_constants.TOY_NUM_BLOCKS, show_default=True, type=int)
@run_options
@handle_errors
def toy2d_command(dataset, out_dir, iterations, n_samples, train_points, hidden_dim, num_blocks,
                  config_path, set_options, seed, sde_kind, force):
    """Train on a 2-D toy dataset, ODE-sample it and report KL / JSD"""
    cfg = resolve_config(config_path, set_options, seed, sde_kind)
    out_dir = Path(out_dir)
    samples_path = ensure_output_path(out_dir / f"{dataset}_samples.csv", force)
    metrics_path = ensure_output_path(out_dir / f"{dataset}_metrics.json", force)

    net_cfg = toy_net_config(cfg.seed, hidden_dim=hidden_dim, num_blocks=num_blocks)
    train_cfg = replace(cfg.train, iterations=iterations)
    result = run_toy_benchmark(
        dataset, seed=cfg.seed, n_samples=n_samples, train_points=train_points,
        spec=cfg.sde, net_cfg=net_cfg, train_cfg=train_cfg, ode_cfg=cfg.ode, progress=progress_enabled(),
    )
    _write_points(result.samples, samples_path)
    used = replace(cfg, net=net_cfg, train=train_cfg)
    write_json({**result.to_dict(), 'config': used.to_dict()}, metrics_path, force=True)
    click.echo(f"{dataset}: KL {result.kl_nats:.4f}  JSD {result.jsd_nats:.4f}")


@cli.command('sample')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(), help='Trained model (RDM1) [paths.checkpoint]')
@click.option('-n', '--num-samples', default=toy_constants.TOY_SAMPLES, show_default=True, type=int)
@click.option('--label', type=int, help='Class condition for conditional models')
@click.option('--out', 'out_path', type=click.Path(), help='Points CSV [paths.output]')
@run_options
@handle_errors
def sample_command(checkpoint_path, num_samples, label, out_path, config_path, set_options, seed, sde_kind, force):
    """Draw samples from a trained model with the probability flow ODE"""
    cfg = resolve_config(config_path, set_options, seed, sde_kind)
    checkpoint_path = config_path_or(checkpoint_path, cfg, 'checkpoint', '--checkpoint')
    out_path = config_path_or(out_path, cfg, 'output', '--out')
    out_path = ensure_output_path(out_path, force)
    checkpoint = read_checkpoint(checkpoint_path)
    if checkpoint.model.config.conditional and label is None:
        raise ConfigError("Conditional model needs --label")
    points = ode_sample(
        checkpoint.model, checkpoint.sde, checkpoint.normalizer, num_samples, cfg.ode,
        seed=cfg.seed, labels=label if checkpoint.model.config.conditional else None,
        progress=progress_enabled(),
    )
    _write_points(points, out_path)
    click.secho(f"{points.shape[0]} samples written to {out_path}", fg='green')


@cli.command('residual-sweep')
@click.option('--train', 'train_path', required=True, type=click.Path())
@click.option('--id', 'id_path', required=True, type=click.Path())
@click.option('--ood', 'ood_path', required=True, type=click.Path())
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Sweep CSV')
@click.option('--stride', default=1, show_default=True, type=int)
@click.option('--force', is_flag=True, help='Overwrite existing outputs')
@handle_errors
def residual_sweep_command(train_path, id_path, ood_path, out_path, stride, force):
    """AUROC / FPR95 of the Residual score for every number of principal units"""
    out_path = ensure_output_path(out_path, force)
    rows = residual_sweep(
        read_reps(train_path).data, read_reps(id_path).data, read_reps(ood_path).data,
        stride=stride, progress=progress_enabled(),
    )
    table = np.array([[r.num_principal, r.auroc_pct, r.fpr95_pct] for r in rows])
    np.savetxt(out_path, table, delimiter=',', header='num_principal,auroc_pct,fpr95_pct',
               comments='', fmt=['%d', '%.17g', '%.17g'])
    best = max(rows, key=lambda r: r.auroc_pct)
    click.echo(f"Best AUROC {best.auroc_pct:.2f} at {best.num_principal} principal units")


def parse_budgets(text):
    """``EPOCHSxBLOCKS[@LR]`` items, comma separated"""
    if not text:
        return DEFAULT_BUDGETS
    budgets = []
    for item in text.split(','):
        shape, _, lr = item.strip().lower().partition('@')
        epochs, sep, blocks = shape.partition('x')
        if not sep:
            raise ConfigError(f"Budget {item!r} is not EPOCHSxBLOCKS[@LR]")
        try:
            budgets.append(Budget(int(epochs), int(blocks), float(lr) if lr else None))
        except ValueError:
            raise ConfigError(f"Budget {item!r} is not EPOCHSxBLOCKS[@LR]") from None
    return tuple(budgets)


@cli.command('budget-sweep')
@click.option('--train', 'train_path', type=click.Path(), help='Training representations (REPZ) [paths.train]')
@click.option('--id', 'id_path', required=True, type=click.Path())
@click.option('--ood', 'ood_path', required=True, type=click.Path())
@click.option('--out', 'out_path', type=click.Path(), help='Metrics JSON [paths.output]')
@click.option('--budgets', help='Comma separated EPOCHSxBLOCKS[@LR], smallest first')
@run_options
@handle_errors
def budget_sweep_command(train_path, id_path, ood_path, out_path, budgets, config_path, set_options, seed, sde_kind, force):
    """Validation bits/dim next to AUROC for increasing training budgets"""
    cfg = resolve_config(config_path, set_options, seed, sde_kind)
    train_path = config_path_or(train_path, cfg, 'train', '--train')
    out_path = config_path_or(out_path, cfg, 'output', '--out')
    out_path = ensure_output_path(out_path, force)
    train, id_eval, ood_eval = read_reps(train_path), read_reps(id_path), read_reps(ood_path)
    conditional = cfg.conditional
    rows = budget_sweep(
        train.data, id_eval.data, ood_eval.data, cfg.sde,
        cfg.net_for(train.dim, _num_classes(train.labels) if conditional else None),
        cfg.train, cfg.ode, budgets=parse_budgets(budgets),
        train_labels=train.labels if conditional else None,
        id_labels=id_eval.labels if conditional else None,
        ood_labels=ood_eval.labels if conditional else None,
        progress=progress_enabled(),
    )
    trend = budget_trend(rows)
    write_json({
        'config': cfg.to_dict(),
        'rows': [r.to_dict() for r in rows],
        'trend': trend.to_dict(),
    }, out_path, force=True)
    click.echo(f"bpd nonincreasing: {trend.bpd_nonincreasing}, AUROC nondecreasing: {trend.auroc_nondecreasing}")


@cli.command('synth')
@click.option('--out-dir', required=True, type=click.Path())
@click.option('--dim', default=8, show_default=True, type=int)
@click.option('--n-train', default=40960, show_default=True, type=int)
@click.option('--n-eval', default=4096, show_default=True, type=int)
@click.option('--shift', default=4.0, show_default=True, type=float, help='OOD shift in component standard deviations')
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--force', is_flag=True, help='Overwrite existing outputs')
@handle_errors
def synth_command(out_dir, dim, n_train, n_eval, shift, seed, force):
    """Write the synthetic Gaussian-mixture OOD task as REPZ files"""
    task = make_task(dim=dim, n_train=n_train, n_eval=n_eval, shift=shift, seed=seed)
    out_dir = Path(out_dir)
    for name, split in (('train', task.train), ('id', task.id_eval), ('ood', task.ood_eval)):
        reps = RepresentationSet(data=split.data, labels=split.labels, dataset_id=f"synthetic-{name}")
        write_reps(reps, out_dir / f"{name}.repz", force=force)
    click.secho(f"Synthetic task written to {out_dir}", fg='green')


@cli.command('show-config')
@run_options
@handle_errors
def show_config_command(config_path, set_options, seed, sde_kind, force):
    """Print the fully resolved run configuration as YAML"""
    cfg = resolve_config(config_path, set_options, seed, sde_kind)
    click.echo(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def main():
    cli()


if __name__ == '__main__':
    main()
