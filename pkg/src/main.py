import logging
import os
import sys
from argparse import ArgumentError
from typing import List, Optional

logger = logging.getLogger(__name__)

import lightning as L
import torch
from lightning.pytorch.cli import ArgsType

from cli_modules import commands
from cli_modules.config import FLAG_KEYS, load
from cli_modules.parser import build_parser
from cli_modules.rich import StableMaskCLI
from utils.errors import ConfigError, StableMaskError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def fit_main(args: ArgsType = None, run: bool = True) -> StableMaskCLI:
    """``fit`` goes through LightningCLI; ``args`` may also be a config dict."""
    return StableMaskCLI(
        L.LightningModule,
        L.LightningDataModule,
        parser_kwargs={
            "parser_mode": "omegaconf",
            "exit_on_error": False,
            "fit": {"parser_mode": "omegaconf", "exit_on_error": False},
        },
        subclass_mode_model=True,
        subclass_mode_data=True,
        save_config_kwargs={"overwrite": True},
        args=args,
        run=run,
    )


def _dispatch(args) -> int:
    subcommand = args.subcommand
    if subcommand == "defaults":
        return commands.cmd_defaults()

    sub = args[subcommand]
    flags = {k: sub.get(k) for k in FLAG_KEYS if k in sub}
    cfg = load(sub.config, sub.overrides or [], flags)
    as_json = sub.json

    if subcommand == "eval":
        return commands.cmd_eval(cfg, sub.ckpt, as_json)
    if subcommand == "probe":
        return commands.cmd_probe(cfg, sub.ckpt, as_json)
    if subcommand == "bench":
        return commands.cmd_bench(cfg, sub.ckpt, as_json)
    if subcommand == "generate":
        return commands.cmd_generate(cfg, sub.ckpt, sub.prompt, as_json)
    if subcommand == "report":
        return commands.cmd_report(cfg, sub.table, sub.root, as_json)
    return commands.cmd_verify(cfg.train.seed, as_json)


def cli_main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("STABLEMASK_LOG_LEVEL", "INFO"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    torch.set_default_dtype(torch.float64)
    argv = sys.argv[1:] if argv is None else list(argv)

    try:
        if argv[:1] == ["fit"]:
            fit_main(argv)
            return EXIT_OK
        args = build_parser().parse_args(argv)
        return _dispatch(args)
    except ArgumentError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except ConfigError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_CONFIG
    except (StableMaskError, FloatingPointError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(cli_main())
