import logging
from pathlib import Path
from typing import List, Union

from nets import IGNORE_INDEX
from utils.errors import ConfigError, DatasetError

from .synthetic import TaskSample

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256


def encode(text: str) -> List[int]:
    return list(text.encode("utf-8"))


def decode(ids: List[int], errors: str = "strict") -> str:
    """Bytes back to text. Model output may split a code point, pass ``errors="replace"`` for it."""
    try:
        return bytes(ids).decode("utf-8", errors=errors)
    except UnicodeDecodeError as e:
        raise DatasetError(f"byte ids are not valid UTF-8 at offset {e.start}: {e.reason}") from e


def ingest_char_corpus(path: Union[str, Path], chunk: int = 64) -> List[TaskSample]:
    """Cut a UTF-8 file into ``len // chunk`` byte-level next-token samples.

    The target of a chunk's last position is the first byte of the next chunk,
    and is ignored when the file ends there.
    """
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read corpus {path}: {e}") from e
    if not data:
        raise DatasetError(f"corpus {path} is empty")
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DatasetError(f"corpus {path} is not valid UTF-8 at byte {e.start}: {e.reason}") from e

    samples = []
    for s in range(len(data) // chunk):
        ids = list(data[s * chunk : (s + 1) * chunk])
        nxt = data[(s + 1) * chunk] if (s + 1) * chunk < len(data) else IGNORE_INDEX
        samples.append(TaskSample(ids, ids[1:] + [nxt]))
    if not samples:
        raise DatasetError(f"corpus {path} is shorter than one chunk of {chunk} bytes")
    logger.info("ingested %s: %d bytes, %d samples of %d", path, len(data), len(samples), chunk)
    return samples
