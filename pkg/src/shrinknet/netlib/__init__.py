from .archs import ARCHITECTURES, mini_teacher, student_depthwise, student_plain
from .layers import (
    BatchNorm,
    Conv,
    Dense,
    Dropout,
    GlobalAvgPool,
    ModelSpec,
    ReLU,
    ResidualAdd,
    SpecError,
    TraceEntry,
    check_head,
    infer_shapes,
)
from .model import Model, build, forward_embed
from .cost import CostReport, REFERENCE_SIZES, cost_report, count_madds, count_params, dense_bytes, sparse_bytes, sparse_tensor_bytes
from .fileformat import ModelFormatError, decode, encode, load, payload_size, read_header, save
