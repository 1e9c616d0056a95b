from .ops import (
    DEFAULT_DTYPE,
    backward,
    elementwise,
    exp,
    log,
    matmul,
    neg,
    rmsnorm,
    scale,
    softmax_rows,
    swiglu,
    zero_grad,
)
from .gradcheck import GradCheckResult, check_gradients, check_module_gradients
