import json
import logging
import os
import os.path as osp
import time
from typing import IO, Any, Dict, Optional

import lightning as L
from lightning.pytorch.utilities.rank_zero import rank_zero_only

logger = logging.getLogger(__name__)


class MetricsStream(L.Callback):
    """One JSON object per optimizer step, plus one per validation run.

    Step lines carry ``step, loss, lr, grad_norm, wall_ms``; eval lines carry
    ``step, eval_loss, eval_ppl, eval_acc``. ``wall_ms`` is the only field that
    differs between two runs with the same seed.
    """

    def __init__(self, path: str = "metrics.jsonl", echo: bool = False) -> None:
        super().__init__()
        self.path = path
        self.echo = echo
        self._fh: Optional[IO[str]] = None
        self._t0 = 0.0
        self._lr = float("nan")

    def _write(self, record: Dict[str, Any]) -> None:
        line = json.dumps(record)
        self._fh.write(line + "\n")
        self._fh.flush()
        if self.echo:
            print(line)

    @rank_zero_only
    def on_fit_start(self, trainer, pl_module) -> None:
        os.makedirs(osp.dirname(self.path) or ".", exist_ok=True)
        self._fh = open(self.path, "w")
        self._t0 = time.perf_counter()
        logger.info("writing metrics to %s", self.path)

    @rank_zero_only
    def on_before_optimizer_step(self, trainer, pl_module, optimizer) -> None:
        self._lr = optimizer.param_groups[0]["lr"]

    @rank_zero_only
    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx) -> None:
        loss = outputs["loss"] if isinstance(outputs, dict) else outputs
        self._write(
            {
                "step": trainer.global_step,
                "loss": float(loss),
                "lr": self._lr,
                "grad_norm": pl_module.last_grad_norm,
                "wall_ms": (time.perf_counter() - self._t0) * 1000.0,
            }
        )

    @rank_zero_only
    def on_validation_end(self, trainer, pl_module) -> None:
        if trainer.sanity_checking or self._fh is None or not pl_module.last_eval:
            return
        self._write({"step": trainer.global_step, **pl_module.last_eval})

    def _close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @rank_zero_only
    def on_fit_end(self, trainer, pl_module) -> None:
        self._close()

    @rank_zero_only
    def on_exception(self, trainer, pl_module, exception: BaseException) -> None:
        logger.warning("fit stopped by %s; closing %s", type(exception).__name__, self.path)
        self._close()

    def teardown(self, trainer, pl_module, stage: str) -> None:
        self._close()
