from .stablemask import (
    PSEUDO_SCHEDULES,
    MaskMode,
    MaskPair,
    MaskSpec,
    apply_stablemask,
    build_infer_row,
    build_masks,
    causal_ones,
    closed_form_mask_ratio,
    masks_for,
    pseudo_scores,
    resolve_tau,
    tau_extrapolate,
    tau_infer,
)
