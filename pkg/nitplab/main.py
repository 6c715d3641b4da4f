import argparse
import json
import logging
import sys

from .ablation import AXES, format_table, run_ablation
from .compare import compare_runs, format_report as format_compare
from .configs import ConfigManager, PRESETS, ProbeConfig, get_preset, load_arch_spec
from .flops import format_report as format_flops, ntp_train_flops
from .theory import run_verification
from .trainer import probe, train

logger = logging.getLogger(__name__)


def parse_dims(value):
    """Parse a comma-separated list of positive dimensions."""
    try:
        dims = [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid dimension list '{value}'")
    if not dims or any(d < 2 for d in dims):
        raise argparse.ArgumentTypeError('Dimensions must be integers >= 2')
    return dims


def run_train(args):
    """Train one run from a configuration file."""
    run = ConfigManager().load_config(args.config)
    record = train(run, resume_from=args.resume)
    print(json.dumps(record.to_dict()))


def run_verify(args):
    """Print the closed-form vs finite-difference verification table."""
    rows = run_verification(dims=args.dims, cases=args.cases, seed=args.seed)
    print(f"{'case':<14}{'d':>5}{'grad_err':>12}{'hess_err':>12}{'radial':>12}{'min_lifted':>14}  ok")
    for r in rows:
        lifted = '-' if r.min_lifted is None else f"{r.min_lifted:.4e}"
        print(f"{r.case_id:<14}{r.dim:>5}{r.grad_err:>12.2e}{r.hess_err:>12.2e}{r.radial:>12.2e}{lifted:>14}  "
              f"{'yes' if r.passed else 'NO'}")
    for r in rows:
        print(r.machine_line())
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} cases passed")
    if failed:
        sys.exit(1)


def run_probe(args):
    """Print a geometry snapshot of a checkpoint."""
    snap = probe(args.checkpoint, args.corpus, ProbeConfig(num_pairs=args.num_pairs, seed=args.seed))
    print(json.dumps(snap.to_dict()))


def run_flops(args):
    """Print the per-token training FLOPs breakdown."""
    spec = get_preset(args.preset) if args.preset else load_arch_spec(args.config)
    breakdown = ntp_train_flops(spec)
    if args.json:
        print(json.dumps({'arch': spec.to_dict(), **breakdown.to_dict(args.tokens)}))
    else:
        print(format_flops(spec, breakdown, args.tokens))


def run_ablate(args):
    """Train every arm of one ablation axis."""
    run = ConfigManager().load_config(args.config)
    table = run_ablation(run, args.axis)
    print(format_table(table))


def run_compare(args):
    """Print the aligned comparison of two metrics logs."""
    print(format_compare(compare_runs(args.a, args.b)))


def main():
    parser = argparse.ArgumentParser(description="Next implicit token prediction lab")
    parser.add_argument('--log-level',
                        default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help='Set the logging level (default: INFO)')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    train_parser = subparsers.add_parser('train', help='Train a toy model')
    train_parser.add_argument('--config', required=True, help='Run configuration YAML')
    train_parser.add_argument('--resume', help='Checkpoint directory to resume from')
    train_parser.set_defaults(func=run_train)

    verify_parser = subparsers.add_parser('verify', help='Check the cosine-loss curvature identities')
    verify_parser.add_argument('--dims', type=parse_dims, default=[3, 8, 32, 128],
                               help='Comma-separated dimensions (default: 3,8,32,128)')
    verify_parser.add_argument('--cases', type=int, default=50, help='Random cases per dimension (default: 50)')
    verify_parser.add_argument('--seed', type=int, default=0)
    verify_parser.set_defaults(func=run_verify)

    probe_parser = subparsers.add_parser('probe', help='Geometry snapshot of a checkpoint')
    probe_parser.add_argument('--checkpoint', required=True, help='Checkpoint directory')
    probe_parser.add_argument('--corpus', required=True, help='Text file or directory')
    probe_parser.add_argument('--num-pairs', type=int, default=1024)
    probe_parser.add_argument('--seed', type=int, default=0)
    probe_parser.set_defaults(func=run_probe)

    flops_parser = subparsers.add_parser('flops', help='Training FLOPs per token')
    source = flops_parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--config', help='Architecture or run configuration YAML')
    source.add_argument('--preset', choices=sorted(PRESETS), help='Built-in architecture')
    flops_parser.add_argument('--json', action='store_true', help='Machine-readable output')
    flops_parser.add_argument('--tokens', type=int, help='Multiply per-token totals by this many tokens')
    flops_parser.set_defaults(func=run_flops)

    ablate_parser = subparsers.add_parser('ablate', help='Run the arms of an ablation axis')
    ablate_parser.add_argument('--config', required=True, help='Base run configuration YAML')
    ablate_parser.add_argument('--axis', required=True, choices=AXES)
    ablate_parser.set_defaults(func=run_ablate)

    compare_parser = subparsers.add_parser('compare', help='Compare two metrics logs')
    compare_parser.add_argument('--a', required=True, help='Reference metrics.jsonl')
    compare_parser.add_argument('--b', required=True, help='Compared metrics.jsonl')
    compare_parser.set_defaults(func=run_compare)

    args = parser.parse_args()

    # Set up logging
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(module)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
    )

    if args.command is None:
        parser.print_help()
        return

    try:
        args.func(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        raise


if __name__ == "__main__":
    main()
