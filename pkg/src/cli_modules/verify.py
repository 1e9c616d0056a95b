"""Self-contained invariant suite behind the ``verify`` subcommand."""
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List

import torch

from inference import KVCache, decode_step
from masks import MaskMode, apply_stablemask, build_masks, closed_form_mask_ratio
from nets import BlockPlan, DecoderLM, MaskConfig, ModelConfig, PEConfig, construct_position_probe_weights
from nets.streamed_attention import reference_forward, streamed_forward
from numerics import check_gradients, softmax_rows

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)
    wall_ms: float = 0.0


def check_vanilla_reduction(seed: int) -> Dict[str, Any]:
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for n in (1, 2, 5, 16, 33):
        A = torch.randn(2, n, n, generator=gen, dtype=torch.float64)
        probs, _ = apply_stablemask(A, build_masks(n, 0.5, pseudo="none"))
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        vanilla = softmax_rows(A.masked_fill(~causal, float("-inf")))
        worst = max(worst, (probs - vanilla).abs().max().item())
    return {"passed": worst < 1e-12, "max_diff": worst}


def check_mask_ratio(seed: int) -> Dict[str, Any]:
    ok, last_err = True, 0.0
    for n, gamma in itertools.product((2, 17, 64, 256), (0.1, 0.5, 1.0)):
        _, alpha = apply_stablemask(torch.zeros(n, n, dtype=torch.float64), build_masks(n, gamma))
        ok &= bool((alpha[1:] > alpha[:-1]).all())
        last_err = max(last_err, abs(alpha[-1].item() - 1.0))
    return {"passed": ok and last_err < 1e-12, "monotone": ok, "last_row_err": last_err}


def check_position_probe(seed: int) -> Dict[str, Any]:
    worst = 0.0
    for n, gamma in itertools.product((4, 16, 64), (0.25, 0.5, 1.0)):
        cfg = ModelConfig(
            vocab_size=8, model_dim=8, n_layers=1, n_heads=2, max_len=n,
            mask=MaskConfig(gamma=gamma), pe=PEConfig(kind="rope"),
        )
        torch.manual_seed(seed)
        model = DecoderLM(cfg)
        probe = construct_position_probe_weights(model)
        tokens = torch.randint(0, cfg.vocab_size, (1, n))
        with torch.no_grad():
            hidden = model(tokens, return_hidden=True).hidden[0][0, :, probe.output_dim]
        worst = max(worst, (hidden - closed_form_mask_ratio(n, gamma)).abs().max().item())
    return {"passed": worst < 1e-12, "max_diff": worst}


def check_suffix_equivalence(seed: int) -> Dict[str, Any]:
    worst = 0.0
    for N in (8, 32, 64):
        cfg = ModelConfig(vocab_size=11, model_dim=16, n_layers=2, n_heads=2, max_len=N)
        torch.manual_seed(seed)
        model = DecoderLM(cfg).eval()
        seq = torch.randint(0, cfg.vocab_size, (N,)).tolist()
        with torch.no_grad():
            full = model(torch.tensor([seq])).logits[0]
        cache = KVCache(cfg.n_layers)
        for t in range(N - 1):
            logits, cache = decode_step(model, cache, seq[t])
            worst = max(worst, (logits - full[t]).abs().max().item())
    return {"passed": worst < 1e-10, "max_diff": worst}


def check_streamed(seed: int) -> Dict[str, Any]:
    worst, count = 0.0, 0
    for n in (1, 2, 7, 32, 50, 128):
        sizes = sorted({1, 3, 8, n})
        for br, bc in itertools.product(sizes, sizes):
            for k, gamma in enumerate((0.1, 0.5, 1.0)):
                gen = torch.Generator().manual_seed(seed + k)
                Q, K, V = (torch.randn(2, n, 8, generator=gen, dtype=torch.float64) for _ in range(3))
                O, L = streamed_forward(Q, K, V, BlockPlan(min(br, n), min(bc, n), n), gamma)
                O_ref, L_ref = reference_forward(Q, K, V, gamma)
                worst = max(worst, (O - O_ref).abs().max().item(), (L - L_ref).abs().max().item())
                count += 1
    return {"passed": worst < 1e-10, "max_diff": worst, "instances": count}


def check_attention_gradients(seed: int, n_seeds: int = 20) -> Dict[str, Any]:
    n = 5
    masks = build_masks(n, 0.5)
    cfg = ModelConfig(vocab_size=7, model_dim=8, n_layers=1, n_heads=2, max_len=n)
    worst = 0.0
    for s in range(seed, seed + n_seeds):
        gen = torch.Generator().manual_seed(s)
        A = torch.randn(n, n, generator=gen, dtype=torch.float64)
        scores = check_gradients(lambda a: apply_stablemask(a, masks)[0], [A], seed=s)

        torch.manual_seed(s)
        attn = DecoderLM(cfg).blocks[0].attn
        x = torch.randn(1, n, cfg.model_dim, generator=gen, dtype=torch.float64)
        layer = check_gradients(lambda inp: attn(inp)[0], [x], seed=s)
        worst = max(worst, scores.max_rel_error, layer.max_rel_error)
    return {"passed": worst < 1e-5, "max_rel_error": worst, "seeds": n_seeds}


CHECKS: Dict[str, Callable[[int], Dict[str, Any]]] = {
    "vanilla_reduction": check_vanilla_reduction,
    "mask_ratio_monotone": check_mask_ratio,
    "position_probe": check_position_probe,
    "suffix_equivalence": check_suffix_equivalence,
    "streamed_equivalence": check_streamed,
    "attention_gradients": check_attention_gradients,
}


def run_verify(seed: int = 0) -> List[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        start = time.perf_counter()
        details = check(seed)
        passed = bool(details.pop("passed"))
        results.append(CheckResult(name, passed, details, (time.perf_counter() - start) * 1000.0))
        logger.info("%s: %s %s", name, "ok" if passed else "FAILED", details)
    return results


def report_json(results: List[CheckResult]) -> str:
    return json.dumps(
        {"passed": all(r.passed for r in results), "checks": [asdict(r) for r in results]}, indent=2
    )
