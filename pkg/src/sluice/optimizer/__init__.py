"""Cost model and static optimization passes."""
from .cost import (
    cost_base,
    cost_reordered,
    cost_with_cache,
    f_fraction,
    fused_cost,
    fusion_io_factor,
    offload_cost,
    reordered_input_size,
    size_scaling,
    total_cost,
)
from .enumerate import enumerate_reorderings, recursive_orderings
from .explain import explain
from .passes import (
    cache_sites,
    calculate_shards,
    fuse_and_offload_pass,
    fusion_groups,
    greedy_fuse_and_offload,
    insert_cache_pass,
    insert_prefetch_pass,
    optimize,
    reorder_pass,
    variant_options,
)
from .plan import CostModelParams, Plan, measure_disk_factor

__all__ = [
    "CostModelParams", "Plan", "cache_sites", "calculate_shards", "cost_base", "cost_reordered",
    "cost_with_cache", "enumerate_reorderings", "explain", "f_fraction", "fuse_and_offload_pass",
    "fused_cost", "fusion_groups", "fusion_io_factor", "greedy_fuse_and_offload",
    "insert_cache_pass", "insert_prefetch_pass", "measure_disk_factor", "offload_cost", "optimize",
    "recursive_orderings", "reorder_pass", "reordered_input_size", "size_scaling", "total_cost",
    "variant_options",
]
