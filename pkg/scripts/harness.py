"""
Policy Evaluation Harness - Experiment Runner and CLI

Runs policy-evaluation experiments on exactly solvable MDPs, comparing the
KOVA optimizer against the MLE-SGD baseline, and records value error against
the exact oracle per iteration:

1. Build the MDP, policy, value model and exact V^π from the config
2. Per iteration: refresh θ′, roll out, sample a labelled batch, take one
   optimizer step, record metrics
3. Write the metrics CSV

Subcommands:
    run    --config PATH [--seed S] [--out PATH]
    verify [--fast]
    sweep  --config PATH --param KEY --values V1,V2,... [--jobs J]

Exit codes: 0 success, 1 config or usage error, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from utilities import envs
from utilities.config import EXPECTED, KOVA, ExperimentConfig, load_config
from utilities.errors import (ConfigError, DivergenceError, GainComputationError,
                              InsufficientDataError, RunAborted, SingularCovarianceError)
from utilities.kova import init_state, kova_step
from utilities.objectives import ekf_loss, mle_gradient, mle_loss, sgd_mle_step
from utilities.targets import GAE, KSTEP, TRAJECTORY_STORE, Batch, SampleGenerator, sample_batch
from utilities.valuefunc import forward, init_params
from utilities.verify import run_default_suite

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['iteration', 'rms_value_error', 'mle_loss', 'ekf_loss', 'cov_trace',
               'grad_or_innovation_norm', 'wall_ms']

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


@dataclass
class MetricsRow:
    """Metrics recorded after one optimizer step"""

    iteration: int
    rms_value_error: float
    mle_loss: float
    ekf_loss: Optional[float]
    cov_trace: Optional[float]
    grad_or_innovation_norm: float
    wall_ms: Optional[float] = None

    def is_finite(self) -> bool:
        values = [v for k, v in asdict(self).items() if k != 'iteration' and v is not None]
        return bool(np.all(np.isfinite(values)))

    def to_dict(self) -> Dict:
        return asdict(self)


# --- Experiment loop ------------------------------------------------------------

def _seeds(seed: int) -> Tuple[int, int, int]:
    """Independent init, rollout and sampler seeds derived from the run seed"""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(child.generate_state(1)[0]) for child in children)


def _expected_batch(generator: SampleGenerator, cfg: ExperimentConfig, mdp: envs.MdpSpec,
                    policy: envs.PolicySpec, model, target_theta: np.ndarray) -> Batch:
    """
    Batch at sampled anchors labelled with noiseless expected targets.

    Expected targets need no lookahead, so any visited step is an anchor.
    """
    spec = cfg.target_spec()
    anchors = generator.sample_anchors(cfg.batch_size, replace(spec, type=KSTEP, k=1))
    inputs = np.array([generator.anchor_input(a, spec) for a in anchors])
    values = forward(model, target_theta, np.eye(mdp.n_states))
    if spec.type == GAE:
        expected = envs.expected_gae_values(mdp, policy, values, spec.lam)
    else:
        expected = envs.expected_kstep_values(mdp, policy, values, spec.k)
    targets = expected[np.argmax(inputs, axis=1)]
    ratios = np.array([generator.transition(a).ratio for a in anchors])
    return Batch(inputs=inputs, targets=targets, ratios=ratios, anchors=anchors)


def run_experiment(cfg: ExperimentConfig) -> List[MetricsRow]:
    """
    Run one policy-evaluation experiment.

    Each iteration refreshes the target parameters θ′ ← τθ̂ + (1−τ)θ′, rolls
    out new trajectories, samples a batch of N labelled anchors and applies
    one optimizer step. Fully deterministic given cfg (wall_ms aside, which is
    only recorded when record_timing is set).

    Args:
        cfg: Validated experiment config

    Returns:
        One MetricsRow per iteration

    Raises:
        RunAborted: the optimizer diverged or sampling failed; carries the
            rows recorded before the failure
    """
    mdp = cfg.build_mdp()
    policy = cfg.build_policy(mdp)
    new_policy = cfg.build_new_policy(mdp)
    model = cfg.build_model(mdp)
    spec = cfg.target_spec()
    true_values = envs.exact_value(mdp, policy)
    all_states = np.eye(mdp.n_states)

    init_seed, rollout_seed, sampler_seed = _seeds(cfg.seed)
    rollout_rng = np.random.default_rng(rollout_seed)
    generator = SampleGenerator(TRAJECTORY_STORE, capacity=cfg.rollout_capacity, seed=sampler_seed)

    theta = init_params(model, init_seed, cfg.init_scale)
    target_theta = theta.copy()
    kova_cfg = cfg.kova_config()
    state = init_state(model.param_dim, theta, kova_cfg) if cfg.optimizer == KOVA else None

    logger.info("Running %s on %s (%d states), %s, %d iterations",
                cfg.optimizer, cfg.env_type, mdp.n_states, model, cfg.iterations)

    rows: List[MetricsRow] = []
    for t in range(1, cfg.iterations + 1):
        started = time.perf_counter()
        try:
            target_theta = cfg.tau * theta + (1.0 - cfg.tau) * target_theta

            for _ in range(cfg.rollouts_per_iteration):
                start = int(rollout_rng.integers(mdp.n_states))
                generator.add_trajectory(envs.rollout(mdp, policy, start, cfg.rollout_length,
                                                      rng=rollout_rng, ratio_policy=new_policy))

            if cfg.target_source == EXPECTED:
                batch = _expected_batch(generator, cfg, mdp, policy, model, target_theta)
            else:
                batch = sample_batch(generator, cfg.batch_size, spec, target_theta, model)

            if state is not None:
                previous = state.theta_hat
                state, diagnostics = kova_step(state, batch, model, kova_cfg)
                theta = np.array(state.theta_hat)
                try:
                    regularized = ekf_loss(batch, model, theta, previous,
                                           diagnostics.pred_cov, diagnostics.obs_noise)
                except SingularCovarianceError:
                    # p0 = 0
                    regularized = None
                cov_trace = float(np.trace(state.cov))
                norm = diagnostics.innovation_norm
            else:
                norm = float(np.linalg.norm(mle_gradient(batch, model, theta)))
                theta = sgd_mle_step(theta, batch, model, cfg.sgd_alpha)
                regularized, cov_trace = None, None
        except (DivergenceError, GainComputationError, InsufficientDataError) as exc:
            logger.error("Run aborted at iteration %d: %s", t, exc)
            raise RunAborted(f"iteration {t}: {exc}", rows) from exc

        errors = forward(model, theta, all_states) - true_values
        row = MetricsRow(
            iteration=t,
            rms_value_error=float(np.sqrt(np.mean(errors ** 2))),
            mle_loss=mle_loss(batch, model, theta),
            ekf_loss=regularized,
            cov_trace=cov_trace,
            grad_or_innovation_norm=norm,
            wall_ms=(time.perf_counter() - started) * 1000.0 if cfg.record_timing else None,
        )
        if not row.is_finite():
            raise RunAborted(f"iteration {t}: non-finite metrics", rows)
        rows.append(row)

        if t % 100 == 0:
            logger.info("  iteration %d: rms value error %.6g", t, row.rms_value_error)

    return rows


# --- CSV ----------------------------------------------------------------------------

def metrics_to_dataframe(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    df = pd.DataFrame([row.to_dict() for row in rows], columns=CSV_COLUMNS)
    float_columns = {column: 'float64' for column in CSV_COLUMNS if column != 'iteration'}
    return df.astype({'iteration': 'int64', **float_columns})


def emit_csv(rows: Sequence[MetricsRow], path: str):
    """
    Write metrics with 17 significant digits; missing values are empty fields.

    Raises:
        OSError: the file could not be written (message names the path)
    """
    df = metrics_to_dataframe(rows)
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        df.to_csv(path, index=False, float_format='%.17g', na_rep='', lineterminator='\n')
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics_csv(path: str) -> List[MetricsRow]:
    """Parse a metrics CSV back into rows, blank fields becoming None"""
    df = pd.read_csv(path, float_precision='round_trip')
    rows = []
    for record in df.to_dict('records'):
        values = {k: (None if pd.isna(v) else float(v)) for k, v in record.items() if k != 'iteration'}
        rows.append(MetricsRow(iteration=int(record['iteration']), **values))
    return rows


# --- Sweep --------------------------------------------------------------------------

def sweep_output_path(output: str, value: str) -> str:
    """metrics.csv + 0.01 -> metrics_0.01.csv"""
    stem, ext = os.path.splitext(output)
    return f"{stem}_{value}{ext}"


def _run_and_emit(cfg: ExperimentConfig) -> Tuple[str, int, Optional[str]]:
    try:
        rows = run_experiment(cfg)
        error = None
    except RunAborted as exc:
        rows, error = exc.rows, str(exc)
    emit_csv(rows, cfg.output)
    return cfg.output, len(rows), error


def run_sweep(cfg: ExperimentConfig, key: str, values: Sequence[str],
              jobs: int = 1) -> List[Tuple[str, int, Optional[str]]]:
    """
    Run one experiment per value of a config key, each writing its own CSV.

    Runs are independent, so with jobs > 1 they execute in separate processes;
    results come back in the order of values.

    Returns:
        (output path, rows written, error message or None) per value

    Raises:
        ConfigError: the key is unknown or a value is invalid for it
    """
    configs = [cfg.with_overrides({key: value, 'output': sweep_output_path(cfg.output, value)})
               for value in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_and_emit, configs))
    return [_run_and_emit(c) for c in configs]


# --- CLI ----------------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='harness', description='KOVA policy-evaluation experiments')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    run = commands.add_parser('run', help='run one experiment')
    run.add_argument('--config', required=True, help='experiment config file')
    run.add_argument('--seed', type=int, help='override the config seed')
    run.add_argument('--out', help='override the output CSV path')

    verify = commands.add_parser('verify', help='run the verification oracles')
    verify.add_argument('--fast', action='store_true', help='fewer Monte-Carlo draws and repeats')

    sweep = commands.add_parser('sweep', help='grid over one config key')
    sweep.add_argument('--config', required=True, help='experiment config file')
    sweep.add_argument('--param', required=True, help='config key to vary, e.g. optimizer.kova.eta')
    sweep.add_argument('--values', required=True, help='comma-separated values')
    sweep.add_argument('--jobs', type=int, default=1, help='parallel runs')
    return parser


def _cmd_run(args) -> int:
    print("=" * 60)
    print("KOVA POLICY EVALUATION RUN")
    print("=" * 60)

    print("\n[1/3] Loading config...")
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = str(args.seed)
    if args.out is not None:
        overrides['output'] = args.out
    cfg = load_config(args.config).with_overrides(overrides)
    print(f"  {cfg.optimizer} on {cfg.env_type} ({cfg.n_states} states), "
          f"{cfg.iterations} iterations, seed {cfg.seed}")

    print("\n[2/3] Running experiment...")
    status = EXIT_OK
    try:
        rows = run_experiment(cfg)
    except RunAborted as exc:
        print(f"Error: run aborted, {exc}", file=sys.stderr)
        rows, status = exc.rows, EXIT_RUNTIME
    if rows:
        print(f"  Final rms value error: {rows[-1].rms_value_error:.6g}")

    print("\n[3/3] Writing metrics...")
    emit_csv(rows, cfg.output)
    print(f"  Wrote {len(rows)} rows to {cfg.output}")

    print("\n" + "=" * 60)
    print("RUN COMPLETE" if status == EXIT_OK else "RUN ABORTED")
    print("=" * 60)
    return status


def _cmd_verify(args) -> int:
    reports = run_default_suite(fast=args.fast)
    for report in reports:
        print(report.format_line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"Error: {len(failed)} oracle check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(',') if v.strip()]
    if not values:
        raise ConfigError("--values needs at least one value")
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    cfg = load_config(args.config)

    print("=" * 60)
    print(f"SWEEP OVER {args.param} ({len(values)} values)")
    print("=" * 60)
    results = run_sweep(cfg, args.param, values, jobs=args.jobs)

    status = EXIT_OK
    for value, (path, n_rows, error) in zip(values, results):
        if error is None:
            print(f"  {args.param} = {value}: {n_rows} rows -> {path}")
        else:
            print(f"  {args.param} = {value}: aborted after {n_rows} rows ({error}) -> {path}")
            status = EXIT_RUNTIME
    return status


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch the subcommand and map failures to exit codes"""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')

    handlers = {'run': _cmd_run, 'verify': _cmd_verify, 'sweep': _cmd_sweep}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, DivergenceError, GainComputationError, InsufficientDataError, OSError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
