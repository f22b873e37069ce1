from __future__ import annotations
from typing import Optional, Sequence

import os
import sys
import json
import argparse
import logging

import attr

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _parse_var(s):
    key, value = [i.strip() for i in s.split("=", 1)]
    return (key, value)


def _parse_vars(items):
    if items:
        return dict(_parse_var(item) for item in items)
    return {}


def _field_overrides(args) -> dict:
    '''
    Training fields from --set pairs, then dedicated flags on top
    '''
    from compl.config import TrainConfig

    overrides = _parse_vars(getattr(args, "set", None))
    for a in attr.fields(TrainConfig):
        value = getattr(args, f"field_{a.name}", None)
        if value is not None:
            overrides[a.name] = value
    return overrides


def _spec_from_args(args):
    from compl.config import parse_config
    return parse_config(args.config,
                        overrides=_field_overrides(args),
                        name=getattr(args, "name", None))


def _emit(rows, args) -> None:
    from compl.results import emit_results

    text = emit_results(rows, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)


def _domains(eval_domains, zero_shot: bool) -> tuple:
    '''
    Evaluation domains of a spec, with the shifted domain added by
    --zero-shot
    '''
    domains = tuple(eval_domains)
    if zero_shot and "shifted" not in domains:
        domains += ("shifted", )
    return domains


def info_util(args):
    from compl.method_factory import view_methods
    from compl.auxiliary.mixins import AuxSettings

    method_map = view_methods()
    display_methods = args.list_methods or not args.get_info

    if args.get_info:
        try:
            method = method_map[args.get_info]
        except KeyError:
            print("Valid method not provided")
            print("Showing available methods")
            display_methods = True
        else:
            print(json.dumps(method(AuxSettings()).describe(), indent=2))

    if display_methods:
        print("Method:\tCompl Class")
        for k, v in method_map.items():
            print(f"{k}:\t{v}")
    return EXIT_OK


def train_util(args):
    '''
    Single training run followed by evaluation of every target task
    '''
    from compl.results import Cell, evaluate_rows
    from compl.trainer import Trainer, make_datasets

    spec = _spec_from_args(args)
    config = spec.train
    domains = _domains(spec.eval_domains, args.zero_shot)
    data = make_datasets(config, shifted="shifted" in domains)

    if args.resume:
        trainer = Trainer.restore(args.resume, data)
        config = trainer.config
    else:
        trainer = Trainer(config, data)
    trainer.run()
    logger.info(f"Training took {trainer.wall_seconds:.1f}s")

    if args.history:
        with open(args.history, "w", newline="") as f:
            trainer.history.write_csv(f)
    if args.checkpoint:
        trainer.save(args.checkpoint)

    cell = Cell(spec.name, 0, config, domains, args.timing)
    _emit(evaluate_rows(cell, trainer.model, data, trainer.wall_seconds),
          args)
    return EXIT_OK


def sweep_util(args):
    '''
    Experiment matrix utility
    '''
    from compl.results import run_matrix

    spec = _spec_from_args(args)
    rows = run_matrix(spec, nthreads=args.nthreads, timing=args.timing)
    _emit(rows, args)
    return EXIT_OK


def eval_util(args):
    '''
    Evaluate a saved checkpoint on freshly generated validation splits
    '''
    from compl.checkpoint import load_checkpoint
    from compl.config import make_train_config, parse_config
    from compl.results import Cell, evaluate_rows
    from compl.trainer import Trainer, make_datasets

    checkpoint = load_checkpoint(args.checkpoint)
    config = make_train_config(checkpoint.meta["config"])
    eval_domains = ("in_domain", )
    if args.spec:
        eval_domains = parse_config(args.spec).eval_domains
    domains = _domains(eval_domains, args.zero_shot)
    data = make_datasets(config, shifted="shifted" in domains)
    trainer = Trainer(config, data)
    trainer.load(checkpoint)

    cell = Cell(args.name or "eval", 0, config, domains)
    _emit(evaluate_rows(cell, trainer.model, data), args)
    return EXIT_OK


def gradcheck_util(args):
    from compl.gradcheck import gradcheck_cmd
    return gradcheck_cmd(sys.stdout, args.only, args.trials)


def gen_data_util(args):
    '''
    Dump the train, validation and shifted splits of a configuration
    '''
    from compl.synthetic import dump_dataset
    from compl.trainer import make_datasets

    config = _spec_from_args(args).train
    data = make_datasets(config, shifted=True)
    os.makedirs(args.out_dir, exist_ok=True)
    for split, dataset in (("train", data.train), ("val", data.val),
                           ("shifted", data.shifted)):
        dump_dataset(dataset, args.out_dir, split)
    logger.info(f"Wrote synthetic splits to {args.out_dir}")
    return EXIT_OK


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    from compl.config import TrainConfig, _ALIASES

    parser.add_argument('config',
                        type=str,
                        nargs='?',
                        help='YAML or JSON experiment specification')
    parser.add_argument('--set',
                        metavar='KEY=VALUE',
                        action='append',
                        help='Set a number of key-value pairs '
                        'to training fields.')
    group = parser.add_argument_group('training fields')
    for a in attr.fields(TrainConfig):
        flags = [f"--{a.name.replace('_', '-')}"]
        flags += [f"--{k}" for k, v in _ALIASES.items() if v == a.name]
        group.add_argument(*flags,
                           dest=f"field_{a.name}",
                           metavar=a.name.upper(),
                           type=str,
                           help=f"Training field {a.name}")


def _add_output_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--out',
                        type=str,
                        help='Write result rows here instead of stdout')
    parser.add_argument('--format',
                        choices=('csv', 'json'),
                        default='csv',
                        help='Result format')


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        description='Command line interface to compl to train dense '
        'prediction tasks jointly with self-supervised auxiliary tasks')

    sub_parsers = p.add_subparsers(help='compl command modes')

    parser_info = sub_parsers.add_parser('info',
                                         help='Get auxiliary method info')
    parser_info.set_defaults(func=info_util)
    group = parser_info.add_mutually_exclusive_group()
    group.add_argument('--list-methods',
                       action='store_true',
                       help="List all registered auxiliary methods")
    group.add_argument('--get-info',
                       metavar='METHOD',
                       type=str,
                       help='Show the head layout of a method')

    parser_train = sub_parsers.add_parser('train', help='Single training run')
    _add_config_args(parser_train)
    _add_output_args(parser_train)
    parser_train.add_argument('--name', type=str, help='Experiment name')
    parser_train.add_argument('--history',
                              type=str,
                              help='Write per-step history CSV')
    parser_train.add_argument('--checkpoint',
                              type=str,
                              help='Save the final state here')
    parser_train.add_argument('--resume',
                              type=str,
                              help='Continue from a saved checkpoint')
    parser_train.add_argument('--zero-shot',
                              action='store_true',
                              help='Also evaluate on the shifted domain')
    parser_train.add_argument('--timing',
                              action='store_true',
                              help='Record wall-clock seconds in results')
    parser_train.set_defaults(func=train_util)

    parser_sweep = sub_parsers.add_parser('sweep',
                                          help='Run an experiment matrix')
    _add_config_args(parser_sweep)
    _add_output_args(parser_sweep)
    parser_sweep.add_argument('--name', type=str, help='Experiment name')
    parser_sweep.add_argument('--nthreads',
                              type=int,
                              nargs="?",
                              const=1,
                              default=1,
                              help="Number of processes to run cells on")
    parser_sweep.add_argument('--timing',
                              action='store_true',
                              help='Record wall-clock seconds in results')
    parser_sweep.set_defaults(func=sweep_util)

    parser_eval = sub_parsers.add_parser('eval',
                                         help='Evaluate a checkpoint')
    parser_eval.add_argument('checkpoint', type=str, help='Checkpoint file')
    parser_eval.add_argument('--name', type=str, help='Experiment name')
    parser_eval.add_argument('--spec',
                             type=str,
                             help='Take evaluation domains from this '
                             'experiment specification')
    parser_eval.add_argument('--zero-shot',
                             action='store_true',
                             help='Also evaluate on the shifted domain')
    _add_output_args(parser_eval)
    parser_eval.set_defaults(func=eval_util)

    parser_grad = sub_parsers.add_parser('gradcheck',
                                         help='Run the gradient check suite')
    parser_grad.add_argument('--only',
                             nargs='+',
                             metavar='COMPONENT',
                             help='Check only these components')
    parser_grad.add_argument('--trials',
                             type=int,
                             default=10,
                             help='Random points per check')
    parser_grad.set_defaults(func=gradcheck_util)

    parser_data = sub_parsers.add_parser('gen-data',
                                         help='Dump synthetic datasets')
    parser_data.add_argument('out_dir', type=str, help='Output directory')
    _add_config_args(parser_data)
    parser_data.set_defaults(func=gen_data_util)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    '''
    Run a subcommand and map failures onto exit codes: 1 for failed
    checks, diverged runs and unexpected errors, 2 for configuration
    errors and unknown names, 3 for I/O errors
    '''
    from compl.config import ValidationError
    from compl.checkpoint import CheckpointError
    from compl.trainer import DivergenceError

    p = build_parser()
    args = p.parse_args(argv)
    if not hasattr(args, "func"):
        p.print_help()
        return EXIT_CONFIG

    try:
        return args.func(args)
    except ValidationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (OSError, CheckpointError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except DivergenceError as e:
        logger.error(f"Run failed: {e}")
        return EXIT_FAILURE
    except KeyError as e:
        logger.error(f"Unknown name: {e}")
        return EXIT_CONFIG
    except Exception:
        logger.exception(f"{args.func.__name__} failed")
        return EXIT_FAILURE


def cli():
    '''
    CLI Entry function
    '''
    sys.exit(main())


if __name__ == '__main__':
    cli()
