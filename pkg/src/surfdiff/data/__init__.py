from .shapes import ShapeOracle, ShapeSpec, gen_shape, smooth_union, sphere_shape
from .generate import (
    AMBIENT,
    DIFFUSE,
    DatasetError,
    DatasetExample,
    DatasetIndex,
    load_example,
    render_ground_truth,
    seeds_for_split,
    trace_oracle,
    verify_dataset,
    write_dataset,
    write_example,
)
