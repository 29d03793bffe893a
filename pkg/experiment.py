"""
Experiment harness: configuration, canonical Grid-World setups, end-to-end runs
and parameter sweeps.

A run builds the Grid-World, solves it in plaintext for the reference Z*,
encrypts the model, runs the encrypted iteration (in process, against a
server over HTTP, or through exchange files), decrypts, and compares.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from dotenv.parser import parse_stream

import outsourcing
from analysis import ErrorReport, bound_parameters, err_metric, verify_run
from encrypted_rerl import (STRATEGIES, STRATEGY_TREE, IterationTrace, client_finish, encrypt_model,
                            encrypt_state, iterate_encrypted)
from errors import CapacityError, ConfigurationError, InvalidInputError
from he_backend import (BACKEND_TOY_CKKS, BACKENDS, BackendParams, HeBackend, KeyMaterial,
                        NoiseBounds, calibrate_noise_bounds, make_backend)
from mdp_core import GridWorldSpec, build_grid_world, parse_cell, parse_cells
from rerl_core import (build_linear_system, greedy_actions, reconstruct_policy, solve_direct, value_iterate)

logger = logging.getLogger(__name__)

MODE_IN_PROCESS = 'in-process'
MODE_CLIENT_SERVER = 'client-server'
MODE_FILE = 'file'
MODES = (MODE_IN_PROCESS, MODE_CLIENT_SERVER, MODE_FILE)

DEFAULT_BASE_MARGIN = 10

# state count -> layout; every non-goal cell touches the goal
CANONICAL_LAYOUTS: Dict[int, GridWorldSpec] = {
    1: GridWorldSpec(width=2, height=1, goal_cell=(0, 1)),
    3: GridWorldSpec(width=2, height=2, goal_cell=(0, 0)),
    7: GridWorldSpec(width=3, height=3, goal_cell=(1, 1), obstacle_cells=frozenset({(0, 0)})),
    15: GridWorldSpec(width=4, height=4, goal_cell=(0, 0)),
}

# config number -> (S, log2 N, log2 scale)
CANONICAL_CONFIGS: Dict[int, tuple] = {
    1: (3, 7, 28),
    2: (3, 7, 30),
    3: (7, 7, 28),
    4: (7, 7, 32),
    5: (3, 8, 29),
    6: (3, 10, 30),
}


def canonical_grid(size: int) -> GridWorldSpec:
    try:
        return CANONICAL_LAYOUTS[size]
    except KeyError:
        raise InvalidInputError(f'no canonical layout with S={size}; have {sorted(CANONICAL_LAYOUTS)}') from None


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f'not a boolean: {text!r}')


def _optional_int(text: str) -> Optional[int]:
    return None if str(text).strip() in ('', 'none') else int(text)


# config-file key -> (ExperimentConfig field, converter)
CONFIG_KEYS: Dict[str, tuple] = {
    'width': ('width', int),
    'height': ('height', int),
    'goal': ('goal', parse_cell),
    'obstacles': ('obstacles', lambda text: frozenset(parse_cells(text))),
    'stage_cost': ('stage_cost', float),
    'lambda': ('lam', float),
    'ring_n': ('ring_n', int),
    'scale_log2': ('scale_log2', int),
    'base_log2': ('base_log2', _optional_int),
    'backend': ('backend', str),
    'iters': ('iters', int),
    'tol': ('tol', float),
    'seed': ('seed', int),
    'mode': ('mode', str),
    'rotation_sum': ('rotation_sum', str),
    'boot_noise_scale': ('boot_noise_scale', float),
    'workers': ('workers', int),
    'endpoint': ('endpoint', str),
    'calibration_trials': ('calibration_trials', int),
    'test_mode': ('test_mode', _parse_bool),
}

ENV_KEYS = {
    'HERL_SEED': 'seed',
    'HERL_SERVER_URL': 'endpoint',
}


@dataclass(frozen=True)
class ExperimentConfig:
    width: int = 2
    height: int = 2
    goal: tuple = (0, 0)
    obstacles: frozenset = frozenset()
    stage_cost: float = 0.5
    lam: float = 10.0
    ring_n: int = 128
    scale_log2: int = 28
    base_log2: Optional[int] = None
    backend: str = BACKEND_TOY_CKKS
    iters: int = 50
    tol: float = 1e-10
    seed: int = 0
    mode: str = MODE_IN_PROCESS
    rotation_sum: str = STRATEGY_TREE
    boot_noise_scale: float = 1024.0
    workers: int = 1
    endpoint: Optional[str] = None
    calibration_trials: int = 100
    test_mode: bool = True
    noise_bounds: Optional[NoiseBounds] = field(default=None, compare=False)

    @property
    def grid_spec(self) -> GridWorldSpec:
        return GridWorldSpec(self.width, self.height, tuple(self.goal), frozenset(self.obstacles), self.stage_cost)

    @property
    def size(self) -> int:
        return len(self.grid_spec.free_cells()) - 1

    @property
    def params(self) -> BackendParams:
        margin = DEFAULT_BASE_MARGIN if self.base_log2 is None else self.base_log2 - self.scale_log2
        return BackendParams(ring_degree=self.ring_n, scale_bits=self.scale_log2, base_margin_bits=margin,
                             seed=self.seed, boot_noise_scale=self.boot_noise_scale)

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigurationError(f'unknown backend {self.backend!r}; choose one of {", ".join(BACKENDS)}')
        if self.mode not in MODES:
            raise ConfigurationError(f'unknown mode {self.mode!r}; choose one of {", ".join(MODES)}')
        if self.rotation_sum not in STRATEGIES:
            raise ConfigurationError(f'unknown rotation_sum {self.rotation_sum!r}')
        if self.iters < 1:
            raise ConfigurationError(f'iters must be at least 1, got {self.iters}')
        if self.workers < 1:
            raise ConfigurationError('workers must be at least 1')
        if self.mode == MODE_CLIENT_SERVER and not self.endpoint:
            raise ConfigurationError('client-server mode needs an endpoint (HERL_SERVER_URL or --endpoint)')
        self.grid_spec.validate()
        self.params.validate()
        if self.size > self.ring_n // 2:
            raise CapacityError(f'S={self.size} exceeds the {self.ring_n // 2} slots of N={self.ring_n}')

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['goal'] = list(self.goal)
        values['obstacles'] = sorted(list(c) for c in self.obstacles)
        values['noise_bounds'] = self.noise_bounds.to_dict() if self.noise_bounds else None
        values['S'] = self.size
        return values

    @classmethod
    def for_canonical(cls, number: int, **overrides) -> 'ExperimentConfig':
        try:
            size, log_n, log_scale = CANONICAL_CONFIGS[number]
        except KeyError:
            raise ConfigurationError(f'no canonical config {number}') from None
        spec = canonical_grid(size)
        return cls(width=spec.width, height=spec.height, goal=spec.goal_cell, obstacles=spec.obstacle_cells,
                   ring_n=2 ** log_n, scale_log2=log_scale, **overrides)

    @classmethod
    def from_sources(cls, path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                     environ: Optional[Mapping[str, str]] = None) -> 'ExperimentConfig':
        """
        Merge defaults < environment < config file < explicit overrides.

        Args:
            path: optional key-value config file
            overrides: typed field values (None entries are ignored)
            environ: environment mapping, defaults to os.environ

        Returns:
            validated ExperimentConfig
        """
        environ = os.environ if environ is None else environ
        values: Dict[str, Any] = {}
        for env_key, field_name in ENV_KEYS.items():
            if environ.get(env_key):
                values[field_name] = environ[env_key]
        if path:
            for key, raw in read_config_file(path).items():
                values[CONFIG_KEYS[key][0]] = raw
        converted = {}
        converters = {name: conv for name, conv in CONFIG_KEYS.values()}
        for name, raw in values.items():
            try:
                converted[name] = converters[name](raw) if isinstance(raw, str) else raw
            except ValueError as e:
                raise ConfigurationError(f'bad value for {name}: {e}') from e
        for name, value in (overrides or {}).items():
            if value is not None:
                converted[name] = value
        config = cls(**converted)
        config.validate()
        return config


def read_config_file(path: str) -> Dict[str, str]:
    """
    Read a ``key = value`` experiment file with python-dotenv.

    Comments, quotes and ``export`` prefixes follow dotenv rules. Lines dotenv
    cannot parse, keys without a value and unknown keys are rejected.
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            bindings = list(parse_stream(handle))
    except OSError as e:
        raise ConfigurationError(f'cannot read config {path}: {e}') from e
    for binding in bindings:
        if binding.error:
            raise ConfigurationError(f'{path}:{binding.original.line}: expected "key = value", '
                                     f'got {binding.original.string.strip()!r}')
    values = dotenv_values(path, interpolate=False)
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f'{path}: unknown key {key!r}')
        if value is None:
            raise ConfigurationError(f'{path}: key {key!r} has no value')
    return dict(values)


@dataclass
class RunResult:
    config: Dict[str, Any]
    timing: Dict[str, float]
    err_T: float
    err_trajectory: List[float]
    bound_curve: List[float]
    z_star: np.ndarray
    z_tilde: np.ndarray
    policy: np.ndarray
    greedy: np.ndarray
    plaintext_greedy: np.ndarray
    plaintext_iterations: int
    trace: IterationTrace
    report: Optional[ErrorReport] = None
    calibrated: Optional[NoiseBounds] = None
    clamped: int = 0
    transcript: bytes = field(default=b'', repr=False)

    @property
    def policy_matches(self) -> bool:
        return bool(np.array_equal(self.greedy, self.plaintext_greedy))

    def summary(self) -> Dict[str, Any]:
        summary = {
            'S': self.config['S'],
            'N': self.config['ring_n'],
            'scale_log2': self.config['scale_log2'],
            'backend': self.config['backend'],
            'mode': self.config['mode'],
            'iters': self.config['iters'],
            **self.timing,
            'boot_share': self.trace.boot_share,
            'err_T': self.err_T,
            'plaintext_iterations': self.plaintext_iterations,
            'policy_matches': self.policy_matches,
            'clamped': self.clamped,
        }
        if self.report is not None:
            summary.update(self.report.summary())
        if self.calibrated is not None:
            summary['noise_bounds'] = self.calibrated.to_dict()
        return summary


def _exchange(config: ExperimentConfig, request: bytes, exchange_dir: Optional[str]) -> bytes:
    if config.mode == MODE_CLIENT_SERVER:
        return outsourcing.post_request(config.endpoint, request)
    if config.mode == MODE_FILE:
        directory = exchange_dir or os.path.join(os.environ.get('HERL_OUT_DIR', '.'), 'exchange')
        outsourcing.write_exchange(directory, request)
        outsourcing.serve_directory(directory)
        return outsourcing.read_exchange_result(directory)
    raise ConfigurationError(f'mode {config.mode!r} does not exchange messages')


def run_experiment(config: ExperimentConfig, backend: Optional[HeBackend] = None,
                   keys: Optional[KeyMaterial] = None, exchange_dir: Optional[str] = None) -> RunResult:
    """
    Run one configuration end to end.

    Args:
        config: validated experiment configuration
        backend: engine to use; built from the config when omitted
        keys: key material; generated when omitted
        exchange_dir: directory for file mode

    Returns:
        RunResult
    """
    config.validate()
    mdp = build_grid_world(config.grid_spec)
    system = build_linear_system(mdp, config.lam)
    z_star = solve_direct(system)
    plain = value_iterate(system, max_iter=10000, tol=config.tol)
    plaintext_policy = reconstruct_policy(mdp, z_star, config.lam)

    if backend is None:
        backend = make_backend(config.params, config.backend, config.noise_bounds)
    if keys is None:
        keys = backend.keygen()
    logger.info('[Synth] S=%d N=%d scale=2^%d backend=%s mode=%s T=%d', system.size, config.ring_n,
                config.scale_log2, backend.name, config.mode, config.iters)

    calibrated = None
    if config.calibration_trials:
        calibrated = calibrate_noise_bounds(backend, keys, trials=config.calibration_trials).bounds

    Z0 = np.ones(system.size)
    model = encrypt_model(system, backend, keys.evaluation)
    Z0_ct = encrypt_state(Z0, backend, keys.evaluation, system.size)

    transcript = b''
    if config.mode == MODE_IN_PROCESS:
        secret = keys.secret if config.test_mode else None
        run = iterate_encrypted(model, Z0_ct, config.iters, backend, keys.evaluation,
                                config.rotation_sum, config.workers, secret)
        Z_T, trace = run.Z_T, run.trace
    else:
        injected = getattr(backend, 'injected', None)
        request = outsourcing.build_request(model, Z0_ct, keys.evaluation, config.iters,
                                            config.rotation_sum, config.workers, injected)
        response = _exchange(config, request, exchange_dir)
        transcript = request + response
        Z_T, trace = outsourcing.parse_response(response)

    finished = client_finish(Z_T, backend, keys.secret, mdp, config.lam)

    report = None
    err_trajectory: List[float] = []
    bound_curve: List[float] = []
    if trace.snapshots:
        if calibrated is not None:
            bp = bound_parameters(system, calibrated, Z0, window=backend.slot_count, z_star=z_star)
            report = verify_run(trace.snapshots, system, bp, z_star)
            err_trajectory, bound_curve = report.err_trajectory, report.bound_curve
        else:
            err_trajectory = [err_metric(z, z_star) for z in trace.snapshots]

    result = RunResult(
        config=config.to_dict(),
        timing=trace.timing_stats(),
        err_T=err_metric(finished.z, z_star),
        err_trajectory=err_trajectory,
        bound_curve=bound_curve,
        z_star=z_star,
        z_tilde=finished.z,
        policy=finished.policy,
        greedy=greedy_actions(finished.policy),
        plaintext_greedy=greedy_actions(plaintext_policy),
        plaintext_iterations=plain.iterations,
        trace=trace,
        report=report,
        calibrated=calibrated,
        clamped=finished.clamped,
        transcript=transcript,
    )
    logger.info('[Synth] Err(T)=%.3e mean %.3fs/iter policy %s', result.err_T, result.timing['mean_s'],
                'matches' if result.policy_matches else 'DIFFERS')
    return result


def noise_sim_bounds_from(params: BackendParams, trials: int = 100) -> NoiseBounds:
    """Observed ToyCkks per-operation errors, for use as NoiseSim injection magnitudes."""
    toy = make_backend(params, BACKEND_TOY_CKKS)
    return calibrate_noise_bounds(toy, toy.keygen(), trials=trials).observed


@dataclass
class SweepResult:
    scale_bits: List[int]
    runs: List[RunResult]

    def rows(self) -> List[Dict[str, Any]]:
        return [{'scale_log2': bits, **run.summary()} for bits, run in zip(self.scale_bits, self.runs)]

    def write_csv(self, path: str) -> None:
        """One row per iteration k, one err column per scale."""
        length = max(len(run.err_trajectory) for run in self.runs)
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['k'] + [f'err_delta_2^{bits}' for bits in self.scale_bits])
            for k in range(length):
                row = [k]
                for run in self.runs:
                    row.append(repr(run.err_trajectory[k]) if k < len(run.err_trajectory) else '')
                writer.writerow(row)


def sweep_scale_factors(base: ExperimentConfig, scale_bits: Sequence[int],
                        runner: Callable[[ExperimentConfig], RunResult] = run_experiment) -> SweepResult:
    """Run base once per scaling factor 2^bits."""
    if len(scale_bits) < 2:
        raise InvalidInputError('a sweep needs at least two scaling factors')
    runs = []
    for bits in scale_bits:
        logger.info('[Sweep] scale 2^%d', bits)
        runs.append(runner(replace(base, scale_log2=int(bits))))
    return SweepResult([int(b) for b in scale_bits], runs)


RESULT_COLUMNS = ('S', 'N', 'scale_log2', 'backend', 'mode', 'iters', 'mean_s', 'min_s', 'max_s', 'err_T')


def write_results(result: RunResult, out_dir: str, pdf: bool = False) -> Dict[str, str]:
    """Write results.csv, trace.csv, report.json (and report.csv / report.pdf when available)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'results': os.path.join(out_dir, 'results.csv'),
        'trace': os.path.join(out_dir, 'trace.csv'),
        'report': os.path.join(out_dir, 'report.json'),
    }
    summary = result.summary()
    with open(paths['results'], 'w', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=RESULT_COLUMNS, extrasaction='ignore')
        writer.writeheader()
        writer.writerow(summary)
    result.trace.write_csv(paths['trace'])
    with open(paths['report'], 'w') as handle:
        json.dump({'summary': summary, 'config': result.config}, handle, indent=2, default=float)
    if result.report is not None:
        paths['errors'] = os.path.join(out_dir, 'report.csv')
        result.report.write_csv(paths['errors'])
    if pdf:
        from report_pdf import build_report_pdf
        paths['pdf'] = os.path.join(out_dir, 'report.pdf')
        build_report_pdf(result, paths['pdf'])
    return paths
