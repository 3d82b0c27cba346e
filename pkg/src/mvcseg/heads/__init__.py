from .complexity import REFERENCE_ROWS, count_macs_params
from .mvc import MvcLayer, MvcStack, mvc_apply, mvc_generate_kernels, mvc_paired_forward, mvc_stack_forward
from .pipeline import PostHead, baseline_cp_logits, baseline_gap_logits, fewshot_logits, supervised_logits
from .prototypes import RegionSet, build_regions, compose_prototype, octant_codes
from .similarity import HEAD_KINDS, ConcatConv, InnerProduct, make_head
