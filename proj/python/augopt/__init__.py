"""Python surface over the augopt core.

Heavy lifting stays in the compiled extension; this layer only decodes the
JSON blobs the core emits into plain dicts.
"""

import json as _json

try:
    from . import _core
except ImportError:  # build-tree layout: extension sits beside the package
    import _core

ConfigError = _core.ConfigError
DataError = _core.DataError
NumericError = _core.NumericError

TaskSpec = _core.TaskSpec
Dataset = _core.Dataset
Task = _core.Task
RunConfig = _core.RunConfig
Run = _core.Run

gen_task = _core.gen_task
save_dataset = _core.save_dataset
load_dataset = _core.load_dataset
train = _core.train
load_run = _core.load_run


def history(run):
    """Per-cadence training records as a list of dicts."""
    return _json.loads(run.history_json())


def tra_policy(run):
    return _json.loads(run.tra_policy_json())


def tea_policy(run):
    return _json.loads(run.tea_policy_json())


def refine_tea(run, val_ds, steps, **kw):
    """Refine the run's test-time policy in place; returns step records."""
    return _json.loads(run.refine_tea(val_ds, steps, **kw))


def evaluate(run, ds, top_z=0, threads=1):
    return _json.loads(run.evaluate(ds, top_z, threads))


def evaluate_labels(pred, ds):
    return _json.loads(_core.evaluate_labels(pred, ds))


__all__ = [
    "ConfigError", "DataError", "NumericError",
    "TaskSpec", "Dataset", "Task", "RunConfig", "Run",
    "gen_task", "save_dataset", "load_dataset", "train", "load_run",
    "history", "tra_policy", "tea_policy", "refine_tea",
    "evaluate", "evaluate_labels",
]
