from .attention_probes import (
    DEFAULT_EPS,
    DAReport,
    da_flags,
    da_scan,
    dump_attention,
    first_token_trend,
    load_attention_dump,
    mask_ratio_curve,
    mutual_info_table,
)
from .report import RUN_TAGS, collect_csv, da_trend, position_accuracy_table
