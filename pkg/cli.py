"""
Command-line front end.

    python cli.py synth --grid 2x2 --goal 0,0 --iters 50 --out results/
    python cli.py serve --port 5000
    python cli.py outsource --endpoint http://localhost:5000 --out results/
    python cli.py sweep --deltas 28,30 --out sweep/
    python cli.py calibrate --ring-n 128 --scale-log2 28
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from errors import ConfigurationError, HerlError
from experiment import (MODE_CLIENT_SERVER, MODE_FILE, ExperimentConfig, run_experiment, sweep_scale_factors,
                        write_results)
from encrypted_rerl import STRATEGIES
from he_backend import (BACKEND_TOY_CKKS, BACKENDS, BackendParams, calibrate_noise_bounds,
                        make_backend)
from mdp_core import GridWorldSpec, build_grid_world, parse_cell, parse_cells, render_grid

logger = logging.getLogger(__name__)


def _grid_size(text: str):
    width, sep, height = text.lower().partition('x')
    if not sep:
        raise argparse.ArgumentTypeError(f'grid must look like WxH, got {text!r}')
    return int(width), int(height)


def _cell(text: str):
    try:
        return parse_cell(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='key = value experiment file')
    parser.add_argument('--grid', type=_grid_size, help='grid size WxH')
    parser.add_argument('--goal', type=_cell, help='goal cell R,C')
    parser.add_argument('--obstacles', help='obstacle cells R,C;R,C')
    parser.add_argument('--lambda', dest='lam', type=float, help='regularization weight')
    parser.add_argument('--ring-n', type=int, help='ring degree N (power of two)')
    parser.add_argument('--scale-log2', type=int, help='log2 of the scaling factor')
    parser.add_argument('--backend', choices=BACKENDS)
    parser.add_argument('--iters', type=int, help='encrypted iterations T')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--mode', choices=('in-process', MODE_CLIENT_SERVER, MODE_FILE))
    parser.add_argument('--rotation-sum', choices=STRATEGIES)
    parser.add_argument('--workers', type=int)
    parser.add_argument('--endpoint', help='synthesis server URL')
    parser.add_argument('--calibration-trials', type=int, help='0 skips calibration and bound checks')
    parser.add_argument('--out', default=os.environ.get('HERL_OUT_DIR'), help='output directory')
    parser.add_argument('--pdf', action='store_true', help='also write report.pdf')


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        'lam': args.lam,
        'ring_n': args.ring_n,
        'scale_log2': args.scale_log2,
        'backend': args.backend,
        'iters': args.iters,
        'seed': args.seed,
        'mode': args.mode,
        'rotation_sum': args.rotation_sum,
        'workers': args.workers,
        'endpoint': args.endpoint,
        'calibration_trials': args.calibration_trials,
        'goal': args.goal,
    }
    if args.grid:
        overrides['width'], overrides['height'] = args.grid
    if args.obstacles is not None:
        try:
            overrides['obstacles'] = frozenset(parse_cells(args.obstacles))
        except ValueError as e:
            raise ConfigurationError(f'bad --obstacles: {e}') from e
    return overrides


def _config(args: argparse.Namespace, **forced) -> ExperimentConfig:
    overrides = _overrides(args)
    overrides.update({k: v for k, v in forced.items() if v is not None})
    return ExperimentConfig.from_sources(args.config, overrides)


def _emit(result, args: argparse.Namespace) -> None:
    summary = result.summary()
    if args.out:
        summary['outputs'] = write_results(result, args.out, pdf=args.pdf)
    config = result.config
    spec = GridWorldSpec(config['width'], config['height'], config['goal'], config['obstacles'], config['stage_cost'])
    print(render_grid(build_grid_world(spec), spec, result.greedy))
    print(json.dumps(summary, indent=2, default=float))


def cmd_synth(args: argparse.Namespace) -> int:
    result = run_experiment(_config(args))
    _emit(result, args)
    return 0


def cmd_outsource(args: argparse.Namespace) -> int:
    endpoint = args.endpoint or os.environ.get('HERL_SERVER_URL')
    mode = MODE_CLIENT_SERVER if endpoint else MODE_FILE
    config = _config(args, mode=mode, endpoint=endpoint)
    result = run_experiment(config, exchange_dir=args.exchange_dir)
    _emit(result, args)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    if args.inbox:
        from outsourcing import serve_directory
        print(json.dumps({'result': serve_directory(args.inbox)}))
        return 0
    from app import app
    port = args.port or int(os.environ.get('PORT', 5000))
    logger.info('[Server] listening on %s:%d', args.host, port)
    app.run(host=args.host, port=port, debug=False)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        deltas = [int(d) for d in args.deltas.split(',') if d.strip()]
    except ValueError as e:
        raise ConfigurationError(f'bad --deltas: {e}') from e
    base = _config(args)
    sweep = sweep_scale_factors(base, deltas)
    rows = sweep.rows()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        sweep.write_csv(os.path.join(args.out, 'sweep.csv'))
        for bits, run in zip(sweep.scale_bits, sweep.runs):
            write_results(run, os.path.join(args.out, f'delta_2^{bits}'))
    print(json.dumps(rows, indent=2, default=float))
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    params = BackendParams(ring_degree=args.ring_n, scale_bits=args.scale_log2,
                           seed=args.seed if args.seed is not None else int(os.environ.get('HERL_SEED', 0)))
    backend = make_backend(params, args.backend)
    calibration = calibrate_noise_bounds(backend, backend.keygen(), trials=args.trials)
    output = {
        'backend': backend.name,
        'ring_n': params.ring_degree,
        'scale_log2': params.scale_bits,
        'trials': calibration.trials,
        'safety': calibration.safety,
        'observed': calibration.observed.to_dict(),
        'bounds': calibration.bounds.to_dict(),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, 'calibration.json'), 'w') as handle:
            json.dump(output, handle, indent=2)
    print(json.dumps(output, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='herl', description='Encrypted RERL policy synthesis')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='run the encrypted pipeline in process')
    _add_experiment_flags(synth)
    synth.set_defaults(handler=cmd_synth)

    outsource = commands.add_parser('outsource', help='send the encrypted job to a server or exchange directory')
    _add_experiment_flags(outsource)
    outsource.add_argument('--exchange-dir', help='directory for file-based exchange')
    outsource.set_defaults(handler=cmd_outsource)

    serve = commands.add_parser('serve', help='run the synthesis server')
    serve.add_argument('--host', default='0.0.0.0')
    serve.add_argument('--port', type=int)
    serve.add_argument('--inbox', help='process request.herl in this directory once and exit')
    serve.set_defaults(handler=cmd_serve)

    sweep = commands.add_parser('sweep', help='repeat a run across scaling factors')
    _add_experiment_flags(sweep)
    sweep.add_argument('--deltas', default='28,30', help='comma-separated log2 scaling factors')
    sweep.set_defaults(handler=cmd_sweep)

    calibrate = commands.add_parser('calibrate', help='measure per-operation noise bounds')
    calibrate.add_argument('--ring-n', type=int, default=128)
    calibrate.add_argument('--scale-log2', type=int, default=28)
    calibrate.add_argument('--backend', choices=BACKENDS, default=BACKEND_TOY_CKKS)
    calibrate.add_argument('--trials', type=int, default=100)
    calibrate.add_argument('--seed', type=int)
    calibrate.add_argument('--out', default=os.environ.get('HERL_OUT_DIR'))
    calibrate.set_defaults(handler=cmd_calibrate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.environ.get('HERL_LOG_LEVEL', 'INFO').upper(),
                        format='%(asctime)s %(levelname)s %(name)s %(message)s', stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except HerlError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
