from typing import Optional

from jsonargparse import ArgumentParser

from nets.position import PE_KINDS

# `fit` is not here: main.py hands it to LightningCLI
SUBCOMMANDS = ("eval", "probe", "bench", "generate", "report", "verify", "defaults")
REPORT_TABLES = ("positions", "da_trend")


def _add_common(parser: ArgumentParser) -> None:
    parser.add_argument("--config", "-c", dest="config", type=Optional[str], default=None)
    parser.add_argument("--seed", type=Optional[int], default=None)
    parser.add_argument("--out", type=Optional[str], default=None, help="output root, defaults to $STABLEMASK_OUT or logs")
    parser.add_argument("--mask", type=Optional[str], default=None, help="vanilla or stablemask")
    parser.add_argument("--pe", type=Optional[str], default=None, help=" | ".join(PE_KINDS))
    parser.add_argument("--gamma", type=Optional[float], default=None)
    parser.add_argument("--headwise-gamma", dest="headwise_gamma", action="store_true", default=False)
    parser.add_argument("--window", type=Optional[int], default=None)
    parser.add_argument("--json", dest="json", action="store_true", default=False)
    # `-n` / `-v` pick the log directory <out>/<name>/<version>/<subcommand>
    parser.add_argument("--name", "-n", dest="name", type=Optional[str], default=None)
    parser.add_argument("--version", "-v", dest="version", type=Optional[str], default=None)
    parser.add_argument("--increment_version", action="store_true", default=False)
    parser.add_argument("overrides", nargs="*", default=[], help="dot-list overrides, e.g. probe.eps=0.1")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="stablemask",
        description="StableMask decoder-only transformer lab; train with `stablemask fit -c configs/fit/config.yaml`",
        exit_on_error=False,
    )
    subcommands = parser.add_subcommands(dest="subcommand")

    for name in SUBCOMMANDS:
        sub = ArgumentParser(exit_on_error=False)
        if name != "defaults":
            _add_common(sub)
        if name in ("eval", "probe", "generate"):
            sub.add_argument("--ckpt", type=str, required=True)
        if name == "bench":
            sub.add_argument("--ckpt", type=Optional[str], default=None)
        if name == "probe":
            sub.add_argument("--kind", type=Optional[str], default=None)
            sub.add_argument("--plot", action="store_true", default=False)
        if name == "generate":
            sub.add_argument("--prompt", type=str, required=True)
        if name == "report":
            sub.add_argument("--table", type=str, required=True, choices=REPORT_TABLES)
            sub.add_argument("--root", type=Optional[str], default=None, help="directory holding <name>/<version> runs, defaults to --out")
        subcommands.add_subcommand(name, sub)
    return parser
