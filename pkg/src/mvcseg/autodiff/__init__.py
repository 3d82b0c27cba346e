from .params import (
    Parameter,
    ParameterSet,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    uniform_weight,
)
from .tensor import (
    PRIMITIVES,
    ComputationRecord,
    NumericDomainError,
    ShapeError,
    Tensor,
    apply_primitive,
    as_tensor,
    backward,
    concat,
    exp,
    log,
    log_softmax,
    grad_enabled,
    matmul,
    no_grad,
    record_of,
    register,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    take_rows,
    tmean,
    transpose,
    tsum,
)
