"""Bi-directional recursive attention over syntax trees.

Submodules are imported lazily so the CLI can configure the process (thread
caps) before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "SyntaxNode": "trees",
    "SyntaxTree": "trees",
    "Vocabulary": "trees",
    "validate": "trees",
    "depth": "trees",
    "branching_stats": "trees",
    "load_trees": "trees",
    "save_trees": "trees",
    "random_tree": "trees",
    "tokenize": "minilang",
    "parse": "minilang",
    "OPS_MINI": "minilang",
    "MINI_VOCAB": "minilang",
    "gen_classify_corpus": "synth",
    "gen_wrongop_corpus": "synth",
    "mutate_operator": "synth",
    "MutationRecord": "synth",
    "Tensor": "numerics",
    "ParamStore": "numerics",
    "grad_check": "numerics",
    "ModelConfig": "model",
    "init_params": "model",
    "encode_tree": "model",
    "NodeStates": "model",
    "build_schedule": "scheduler",
    "check_schedule": "scheduler",
    "cost_report": "scheduler",
    "encode_batch": "batched",
    "TrainConfig": "training",
    "train": "training",
    "evaluate": "training",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
