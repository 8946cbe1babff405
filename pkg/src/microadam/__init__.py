"""MicroAdam: Adam with Top-K sparsified gradients, a sliding-window moment
estimate, and 4-bit quantized error feedback -- plus baselines, theory
calculators and a deterministic experiment harness."""

from .compress import (
    BlockLayout,
    SparseSelection,
    SubspaceBasis,
    contraction_factor,
    lowrank_project,
    subspace_from_accumulator,
    topk_blockwise,
    topk_global,
    zero_selected,
)
from .optim import (
    AdamState,
    AnalyticalState,
    HyperParams,
    MicroAdamState,
    StepReport,
    adam_step,
    amsgrad_step,
    microadam_analytical_step,
    microadam_step,
    microadamw_step,
    run,
    topk_adam_step,
)
from .quantize import QuantizedErrorBuffer, QuantParams, dequantize, quant_params
from .window import GradientWindow, ema_oracle

__version__ = "0.1.0"
