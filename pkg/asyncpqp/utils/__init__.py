from .parallelize import parallelize_inputs
from .serialize import read_frame, to_builtin, write_frame, write_json

__all__ = [
    "parallelize_inputs",
    "read_frame",
    "to_builtin",
    "write_frame",
    "write_json",
]
