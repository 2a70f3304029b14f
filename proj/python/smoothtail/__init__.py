"""Step-wise learning on smooth-tail data for long-tailed detection."""

import json

from ._core import (
    Dataset,
    DataError,
    Detector,
    StageError,
    average_precision,
    box_loss,
    build_head_mask,
    category_repeat_factor,
    class_distill,
    dataset_from_json,
    feature_distill,
    focal_element,
    generate_shapeworld,
    giou,
    hungarian_loss,
    load_annotations,
    load_checkpoint,
    match_cost,
    preset_config,
    select_exemplars,
)
from ._core import run_stepwise as _run_stepwise


def run_stepwise(config_text, run_dir=None):
    """Run the whole chain; returns (unified detector, metrics dict)."""
    model, metrics = _run_stepwise(config_text, run_dir)
    return model, json.loads(metrics)


def with_overrides(config_text, **overrides):
    """Config text with `key = value` overrides; dots in keys are written as '__'."""
    lines = [config_text.rstrip("\n")]
    lines += [f"{key.replace('__', '.')} = {value}" for key, value in overrides.items()]
    return "\n".join(lines) + "\n"
