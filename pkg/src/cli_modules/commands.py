import json
import logging
import math
import os
import os.path as osp
from typing import List, Optional

import pandas as pd
import torch
from omegaconf import OmegaConf

from datasets import (
    build_task_samples,
    decode,
    encode,
    eval_accuracy,
    eval_mode_for,
    long_sequences,
    soft_copy_last_batch,
)
from inference import bench_decode, generate, windowed_ppl
from models import LoadedCheckpoint, load_checkpoint
from nets import DecoderLM, task_loss
from nets.streamed_attention import benchmark
from probes import (
    collect_csv,
    da_scan,
    da_trend,
    dump_attention,
    first_token_trend,
    mask_ratio_curve,
    position_accuracy_table,
)
from utils.errors import ConfigError

from .config import RunConfig, default_yaml, run_dir
from .verify import report_json, run_verify

logger = logging.getLogger(__name__)


def _prepare(cfg: RunConfig, subcommand: str) -> str:
    log_dir = run_dir(cfg, subcommand)
    os.makedirs(log_dir, exist_ok=True)
    OmegaConf.save(OmegaConf.structured(cfg), osp.join(log_dir, "config.yaml"))
    return log_dir


def _variant(model: DecoderLM) -> str:
    mask = "StableMask" if model.mask_spec is not None else "vanilla"
    return f"{mask}+{model.config.pe.kind}"


def _run_tags(loaded: LoadedCheckpoint) -> dict:
    """Columns that let `report` group rows from many runs."""
    return {
        "mask": "stablemask" if loaded.model.mask_spec is not None else "vanilla",
        "pe": loaded.model_config.pe.kind,
        "seed": loaded.seed,
    }


def _emit(df: pd.DataFrame, as_json: bool) -> None:
    print(df.to_json(orient="records") if as_json else df.to_string(index=False))


@torch.no_grad()
def eval_table(model: DecoderLM, task, samples) -> pd.DataFrame:
    """Accuracy, loss and perplexity per evaluated length."""
    mode = eval_mode_for(task)
    rows = []
    by_len = {}
    for s in samples:
        by_len.setdefault(len(s), []).append(s)
    for n, group in sorted(by_len.items()):
        tokens = torch.stack([s.tensors()[0] for s in group])
        targets = torch.stack([s.tensors()[1] for s in group])
        loss = task_loss(model(tokens, mode).logits, targets).item()
        rows.append(
            {
                "model": _variant(model),
                "task": task.kind,
                "length": n,
                "accuracy": eval_accuracy(model, group, mode=mode),
                "loss": loss,
                "ppl": math.exp(min(loss, 700.0)),
            }
        )
    return pd.DataFrame.from_records(rows)


def windowed_table(model: DecoderLM, sequences: torch.Tensor, window: int) -> pd.DataFrame:
    frames = []
    for i, seq in enumerate(sequences.tolist()):
        nll = windowed_ppl(model, seq, window)
        frames.append(pd.DataFrame({"sequence": i, "position": range(1, len(seq)), "nll": nll.tolist()}))
    return pd.concat(frames, ignore_index=True)


def cmd_eval(cfg: RunConfig, ckpt: str, as_json: bool = False) -> int:
    loaded = load_checkpoint(ckpt)
    log_dir = _prepare(cfg, "eval")
    _, evals = build_task_samples(loaded.task)
    df = eval_table(loaded.model, loaded.task, evals).assign(**_run_tags(loaded))
    df.to_csv(osp.join(log_dir, "eval.csv"), index=False)
    _emit(df, as_json)

    window = cfg.decode.window
    if window is not None:
        length = cfg.extrapolation.length_factor * loaded.model_config.max_len
        seqs = long_sequences(loaded.task, length, cfg.extrapolation.n_sequences)
        windowed = windowed_table(loaded.model, seqs, window)
        windowed.to_csv(osp.join(log_dir, "windowed_ppl.csv"), index=False)
        summary = pd.DataFrame(
            [
                {
                    "model": _variant(loaded.model),
                    "length": length,
                    "window": window,
                    "mean_nll": windowed["nll"].mean(),
                    "max_nll": windowed["nll"].max(),
                    "all_finite": bool(torch.isfinite(torch.tensor(windowed["nll"].to_numpy())).all()),
                }
            ]
        )
        _emit(summary, as_json)
    return 0


def _probe_inputs(cfg: RunConfig, task) -> torch.Tensor:
    gen = torch.Generator().manual_seed(cfg.train.seed)
    if cfg.probe.kind == "da_scan":
        if task.kind != "soft_copy_last":
            raise ConfigError("da_scan needs a softCopyLast model, the only task with an exact information ratio")
        return soft_copy_last_batch(task.seq_len, cfg.probe.n_inputs, task.soft_copy_vocab, gen)
    _, evals = build_task_samples(task)
    n = max(len(s) for s in evals)
    same = [s for s in evals if len(s) == n][: cfg.probe.n_inputs]
    return torch.stack([s.tensors()[0] for s in same])


def cmd_probe(cfg: RunConfig, ckpt: str, as_json: bool = False) -> int:
    loaded = load_checkpoint(ckpt)
    model, task = loaded.model, loaded.task
    log_dir = _prepare(cfg, "probe")
    kind = cfg.probe.kind
    inputs = _probe_inputs(cfg, task)

    if kind == "da_scan":
        report = da_scan(model, inputs, cfg.probe.eps, task.soft_copy_vocab)
        with open(osp.join(log_dir, "da_report.json"), "w") as f:
            f.write(report.to_json())
        df = report.head_union_rates
        pd.DataFrame([{"union_rate": report.union_rate, **_run_tags(loaded)}]).to_csv(
            osp.join(log_dir, "da_union.csv"), index=False
        )
        print(json.dumps({"union_rate": report.union_rate}) if as_json else f"union rate: {report.union_rate:.4f}")
    elif kind == "mask_ratio":
        df = mask_ratio_curve(model, inputs)
        df.to_csv(osp.join(log_dir, "mask_ratio.csv"), index=False)
    elif kind == "first_token":
        df = first_token_trend(model, inputs).assign(**_run_tags(loaded))
        df.to_csv(osp.join(log_dir, "first_token.csv"), index=False)
    else:
        with torch.no_grad():
            traces = model(inputs[:1], return_trace=True).traces
        df = dump_attention(traces, osp.join(log_dir, "attention.csv"))

    if cfg.probe.plot:
        from utils.vis import plot_attention, plot_curve

        if kind == "dump":
            plot_attention(traces, cfg.probe.layer, cfg.probe.head, osp.join(log_dir, "attention.png"))
        elif kind == "da_scan":
            plot_curve(report.first_token_mass, osp.join(log_dir, "first_token.png"), y="mass", hue="layer")
        else:
            plot_curve(df, osp.join(log_dir, f"{kind}.png"), y="mass" if kind == "first_token" else df.columns[-1])
    _emit(df, as_json)
    return 0


def cmd_bench(cfg: RunConfig, ckpt: Optional[str] = None, as_json: bool = False) -> int:
    bench = cfg.bench
    log_dir = _prepare(cfg, "bench")
    pairs = [(br, bc) for br in bench.block_sizes for bc in bench.block_sizes]
    df = benchmark(bench.lengths, pairs, bench.head_dim, bench.gamma, cfg.train.seed, bench.repeats)
    df.to_csv(osp.join(log_dir, "streamed.csv"), index=False)
    _emit(df, as_json)

    if bench.decode:
        torch.manual_seed(cfg.train.seed)
        model = load_checkpoint(ckpt).model if ckpt else DecoderLM(cfg.model)
        limit = model.config.max_len if model.config.pe.is_absolute else None
        lengths = [n for n in bench.lengths if limit is None or n <= limit]
        decode_df = pd.concat([bench_decode(model, n, cfg.train.seed) for n in lengths], ignore_index=True)
        decode_df.to_csv(osp.join(log_dir, "decode.csv"), index=False)
        _emit(decode_df, as_json)
    return 0


def _parse_prompt(prompt: str, task) -> List[int]:
    if task.kind == "char_lm":
        return encode(prompt)
    try:
        return [int(t) for t in prompt.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"prompt must be token ids separated by spaces or commas: {prompt!r}") from e


def cmd_generate(cfg: RunConfig, ckpt: str, prompt: str, as_json: bool = False) -> int:
    loaded = load_checkpoint(ckpt)
    tokens = generate(loaded.model, _parse_prompt(prompt, loaded.task), cfg.decode)
    if as_json:
        print(json.dumps({"tokens": tokens}))
    elif loaded.task.kind == "char_lm":
        print(decode(tokens, errors="replace"))
    else:
        print(" ".join(map(str, tokens)))
    return 0


def cmd_verify(seed: int = 0, as_json: bool = False) -> int:
    results = run_verify(seed)
    if as_json:
        print(report_json(results))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.details}")
    return 0 if all(r.passed for r in results) else 2


def cmd_defaults() -> int:
    print(default_yaml())
    return 0


def cmd_report(cfg: RunConfig, table: str, root: Optional[str] = None, as_json: bool = False) -> int:
    """Cross-run tables over ``<root>/<name>/<version>/{eval,probe}`` outputs."""
    root = root or cfg.output.dir
    log_dir = _prepare(cfg, "report")
    if table == "positions":
        df = position_accuracy_table(collect_csv(root, "eval", "eval.csv"))
    else:
        try:
            union = collect_csv(root, "probe", "da_union.csv")
        except ConfigError:
            logger.info("no da_scan runs under %s, reporting first-token mass only", root)
            union = None
        df = da_trend(collect_csv(root, "probe", "first_token.csv"), union=union)
    df.to_csv(osp.join(log_dir, f"{table}.csv"), index=False)
    _emit(df, as_json)
    return 0
