"""Published per-task hyperparameters.

``batch_size``, ``epochs`` and the constant learning rate are not part of the
published table; they are fixed here as reasonable defaults.
"""

from __future__ import annotations

import copy

_SCHEDULE = {"batch_size": 32, "epochs": 30}


def _preset(task, d, h, iters, gamma, decomposition, rank, dropout, lr, wd, l2, d_root=None, **extra):
    model = {"d": d, "h": h, "T_iters": iters, "gamma": gamma, "decomposition": decomposition,
             "dropout": dropout}
    if rank is not None:
        model["rank"] = rank
    if d_root is not None:
        model.update(use_root=True, d_root=d_root)
    return {"task": task, "model": model, "lr": lr, "weight_decay": wd, "l2_ternary": l2,
            **_SCHEDULE, **extra}


PRESETS = {
    "mlm-ptb": _preset("mlm", 384, 16, 5, 3, "uv", 64, 0.15, 1e-3, 1.4e-6, 5e-4),
    "mlm-bllip": _preset("mlm", 384, 16, 5, 3, "uv", 64, 0.15, 1e-3, 1.4e-6, 5e-4),
    "pos-ptb": _preset("pos", 128, 12, 3, 3, "uv", 128, 0.05, 2.4e-3, 8e-6, 0.0),
    "pos-ud": _preset("pos", 128, 18, 2, 3, "full", None, 0.1, 6.2e-3, 2.2e-6, 4e-4),
    # no published NER column: reuses the PTB tagging values
    "ner-conll": _preset("ner", 128, 12, 3, 3, "uv", 128, 0.05, 2.4e-3, 8e-6, 0.0),
    "cls-sst2": _preset("cls", 512, 10, 1, 3, "uv", 64, 0.1, 1e-4, 3e-7, 0.0, d_root=1024),
    "cls-sst5": _preset("cls", 256, 18, 4, 3, "uvw", 64, 0.05, 2e-4, 3e-7, 0.0, d_root=512),
    "cogs": _preset("cogs", 64, 4, 2, 8, "uv", 16, 0.1, 2.5e-3, 1e-9, 0.0),
}


def get_preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
