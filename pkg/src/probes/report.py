"""Cross-run tables over the CSVs that eval and probe leave in each run directory.

Every input frame carries the run tags ``mask`` (``stablemask`` or ``vanilla``),
``pe`` and ``seed`` next to its measurements.
"""
import glob
import logging
import os.path as osp
from typing import Iterable, Optional

import pandas as pd

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

RUN_TAGS = ("mask", "pe", "seed")


def _require(df: pd.DataFrame, columns: Iterable[str], what: str) -> None:
    missing = sorted(set(columns) - set(df.columns))
    if missing:
        raise ConfigError(f"{what} is missing columns {missing}")


def collect_csv(root: str, subcommand: str, filename: str) -> pd.DataFrame:
    """Concatenate ``<root>/<name>/<version>/<subcommand>/<filename>`` over every run."""
    paths = sorted(glob.glob(osp.join(root, "*", "*", subcommand, filename)))
    if not paths:
        raise ConfigError(f"no {subcommand}/{filename} under {root}")
    frames = []
    for path in paths:
        df = pd.read_csv(path)
        run = osp.normpath(path).split(osp.sep)
        df.insert(0, "run", f"{run[-4]}/{run[-3]}")
        frames.append(df)
    logger.info("collected %d %s tables under %s", len(paths), filename, root)
    return pd.concat(frames, ignore_index=True)


def position_accuracy_table(evals: pd.DataFrame, best_of: int = 3) -> pd.DataFrame:
    """One accuracy per task and model variant, the best of up to ``best_of`` seeds.

    A run's accuracy is its mean over the held-out lengths. Rows are
    ``(pe, mask)`` variants, columns are tasks.
    """
    _require(evals, ("task", "accuracy", *RUN_TAGS), "position eval table")
    per_run = evals.groupby(["task", "pe", "mask", "seed"], as_index=False)["accuracy"].mean()
    per_run = per_run.sort_values("seed").groupby(["task", "pe", "mask"]).head(best_of)

    counts = per_run.groupby(["task", "pe", "mask"])["seed"].nunique()
    short = counts[counts < best_of]
    if len(short):
        logger.warning("fewer than %d seeds for %s", best_of, ", ".join("/".join(map(str, k)) for k in short.index))

    best = per_run.groupby(["task", "pe", "mask"], as_index=False)["accuracy"].max()
    table = best.pivot_table(index=["pe", "mask"], columns="task", values="accuracy")
    table.columns.name = None
    return table.reset_index()


def da_trend(
    first_token: pd.DataFrame,
    min_position: int = 8,
    union: Optional[pd.DataFrame] = None,
) -> pd.DataFrame:
    """StableMask minus vanilla first-token attention, paired by seed.

    ``first_token`` holds ``position, mass`` rows per run; only query positions
    past ``min_position`` count. ``union`` optionally adds the paired difference
    of the DA union rate (``mask, seed, union_rate`` rows).
    """
    _require(first_token, ("position", "mass", "mask", "seed"), "first-token table")
    late = first_token[first_token["position"] > min_position]
    if late.empty:
        raise ConfigError(f"no query position past {min_position}")

    per_seed = late.groupby(["seed", "mask"])["mass"].mean().unstack("mask")
    for mask in ("stablemask", "vanilla"):
        if mask not in per_seed.columns:
            raise ConfigError(f"da_trend needs {mask} runs")
    paired = per_seed[["stablemask", "vanilla"]].dropna()
    if paired.empty:
        raise ConfigError("no seed has both a stablemask and a vanilla run")

    out = pd.DataFrame(
        {
            "seed": paired.index.astype(int),
            "stablemask_mass": paired["stablemask"].to_numpy(),
            "vanilla_mass": paired["vanilla"].to_numpy(),
        }
    )
    out["mass_diff"] = out["stablemask_mass"] - out["vanilla_mass"]
    out["stablemask_lower"] = out["mass_diff"] < 0

    if union is not None:
        _require(union, ("mask", "seed", "union_rate"), "union-rate table")
        rates = union.groupby(["seed", "mask"])["union_rate"].mean().unstack("mask")
        rates = rates.reindex(columns=["stablemask", "vanilla"])
        out["union_diff"] = (rates["stablemask"] - rates["vanilla"]).reindex(out["seed"]).to_numpy()
    return out.reset_index(drop=True)
