"""Top-K LoRA selection: score content/style adapters per layer and schedule them per step."""

from ._core import (
    GammaFactor,
    KLoraError,
    LayerImportance,
    LoraModel,
    ScaleMode,
    ScheduleParams,
    SelectionSchedule,
    Source,
    abs_sum,
    build_schedule,
    compute_gamma,
    export_merged_lora,
    matmul,
    parse_file,
    read_manifest,
    render_heatmap,
    run_cli,
    scale_at,
    topk_abs_sum,
    write_manifest,
)

__all__ = [
    "GammaFactor",
    "KLoraError",
    "LayerImportance",
    "LoraModel",
    "ScaleMode",
    "ScheduleParams",
    "SelectionSchedule",
    "Source",
    "abs_sum",
    "build_schedule",
    "compute_gamma",
    "export_merged_lora",
    "matmul",
    "parse_file",
    "read_manifest",
    "render_heatmap",
    "run_cli",
    "scale_at",
    "topk_abs_sum",
    "write_manifest",
]
