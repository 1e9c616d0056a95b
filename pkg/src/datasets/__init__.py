from .synthetic import (
    TaskSample,
    TaskVocab,
    gen_at_baseline,
    gen_odd_even,
    gen_pos_identify,
    gen_pos_mapping,
    sample_pos_identify,
)
from .soft_copy_last import gen_soft_copy_last, mutual_info_ratio, soft_copy_last_batch, soft_copy_prob
from .char_corpus import BYTE_VOCAB, decode, encode, ingest_char_corpus
from .tasks import (
    TaskDataModule,
    TaskSpec,
    build_task_samples,
    eval_accuracy,
    eval_mode_for,
    long_sequences,
    read_samples,
    write_samples,
)
