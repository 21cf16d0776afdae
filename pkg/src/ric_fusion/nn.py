"""Small numpy MLP with per-input-group projection branches, RMSProp and checkpoints.

The network is::

    concat(Linear_g(x_g) for each input group g) -> [Linear -> SiLU] x len(hidden) -> Linear

and returns logits. Gradients are computed by an explicit backward pass.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "ric-fusion-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    """Raised when activations or losses stop being finite."""


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


class BranchMLP:
    def __init__(
        self,
        branches: dict[str, int],
        proj: int | dict[str, int],
        hidden: tuple[int, ...],
        out_dim: int,
        seed: int = 0,
        activation: str = "silu",
    ):
        if activation != "silu":
            raise ValueError(f"unsupported activation {activation!r}")
        self.branches = dict(branches)  # also accepts [(name, dim), ...]
        self.proj = {b: (proj[b] if isinstance(proj, dict) else int(proj)) for b in self.branches}
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = int(out_dim)
        self.activation = activation
        self.seed = seed
        self.params = self._init(np.random.default_rng(seed))

    @property
    def config(self) -> dict:
        return {
            # A list, not a mapping: branch order fixes the concatenation layout.
            "branches": [[b, d] for b, d in self.branches.items()],
            "proj": self.proj,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "seed": self.seed,
        }

    def _init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = {}
        for b, d in self.branches.items():
            p[f"proj.{b}.W"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, self.proj[b]))
            p[f"proj.{b}.b"] = np.zeros(self.proj[b])
        width = sum(self.proj.values())
        for k, h in enumerate(self.hidden):
            p[f"hidden.{k}.W"] = rng.normal(0.0, np.sqrt(2.0 / width), (width, h))
            p[f"hidden.{k}.b"] = np.zeros(h)
            width = h
        p["out.W"] = rng.normal(0.0, 0.01 / np.sqrt(width), (width, self.out_dim))
        p["out.b"] = np.zeros(self.out_dim)
        return p

    def zero_output(self) -> None:
        self.params["out.W"][:] = 0.0
        self.params["out.b"][:] = 0.0

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, inputs: dict[str, np.ndarray]) -> tuple[np.ndarray, dict]:
        p = self.params
        xs = {}
        parts = []
        for b in self.branches:
            x = np.atleast_2d(np.asarray(inputs[b], dtype=float))
            xs[b] = x
            parts.append(x @ p[f"proj.{b}.W"] + p[f"proj.{b}.b"])
        h = np.concatenate(parts, axis=1)
        acts = [h]
        pre = []
        # Non-finite values are reported below with the offending layers.
        with np.errstate(invalid="ignore", over="ignore"):
            for k in range(len(self.hidden)):
                a = h @ p[f"hidden.{k}.W"] + p[f"hidden.{k}.b"]
                pre.append(a)
                h = silu(a)
                acts.append(h)
            logits = h @ p["out.W"] + p["out.b"]
        if not np.all(np.isfinite(logits)):
            bad = [k for k, a in enumerate(pre) if not np.all(np.isfinite(a))]
            n_bad = int(np.count_nonzero(~np.isfinite(logits)))
            raise NumericalError(f"non-finite activations: hidden layers {bad}, {n_bad} non-finite logits")
        return logits, {"x": xs, "acts": acts, "pre": pre}

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        acts, pre = cache["acts"], cache["pre"]
        g = {}
        g["out.W"] = acts[-1].T @ dlogits
        g["out.b"] = dlogits.sum(axis=0)
        dh = dlogits @ p["out.W"].T
        for k in reversed(range(len(self.hidden))):
            da = dh * silu_grad(pre[k])
            g[f"hidden.{k}.W"] = acts[k].T @ da
            g[f"hidden.{k}.b"] = da.sum(axis=0)
            dh = da @ p[f"hidden.{k}.W"].T
        start = 0
        for b in self.branches:
            w = self.proj[b]
            dpart = dh[:, start:start + w]
            start += w
            g[f"proj.{b}.W"] = cache["x"][b].T @ dpart
            g[f"proj.{b}.b"] = dpart.sum(axis=0)
        return g

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


class RMSProp:
    """RMSProp without momentum: ``s <- rho s + (1 - rho) g^2``, ``w <- w - lr g / (sqrt(s) + eps)``."""

    def __init__(self, lr: float = 1e-6, rho: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.square_avg: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0.0:
            self.steps += 1
            return
        for k, g in grads.items():
            s = self.square_avg.get(k)
            if s is None:
                s = np.zeros_like(g)
            s = self.rho * s + (1.0 - self.rho) * g * g
            self.square_avg[k] = s
            params[k] -= self.lr * g / (np.sqrt(s) + self.eps)
        self.steps += 1

    def state(self) -> dict:
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps, "steps": self.steps}


def step_schedule(base_lr: float, epoch: int, halve_at: int | None) -> float:
    """Learning rate for ``epoch`` (0-based): halved once from ``halve_at`` on."""
    if halve_at is not None and epoch >= halve_at:
        return base_lr / 2.0
    return base_lr


def save_checkpoint(path, sections: dict[str, tuple[BranchMLP, RMSProp | None, dict]]) -> None:
    """Write one or more tagged model sections to an ``.npz`` container.

    Each section stores its weights, optional optimizer accumulators and a JSON
    metadata block (network config, optimizer hyper-parameters, caller metadata).
    """
    arrays = {}
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "sections": {}}
    for tag, (model, opt, meta) in sections.items():
        for k, v in model.params.items():
            arrays[f"{tag}/param/{k}"] = np.asarray(v, dtype=np.float64)
        entry = {"network": model.config, "shapes": {k: list(v.shape) for k, v in model.params.items()}, "meta": meta}
        if opt is not None:
            for k, v in opt.square_avg.items():
                arrays[f"{tag}/rmsprop/{k}"] = np.asarray(v, dtype=np.float64)
            entry["optimizer"] = opt.state()
        header["sections"][tag] = entry
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, tag: str) -> tuple[BranchMLP, RMSProp | None, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        if tag not in header["sections"]:
            raise KeyError(f"{path}: no section {tag!r} (have {sorted(header['sections'])})")
        entry = header["sections"][tag]
        net = entry["network"]
        model = BranchMLP(net["branches"], net["proj"], tuple(net["hidden"]), net["out_dim"],
                          seed=net["seed"], activation=net["activation"])
        for k in model.params:
            arr = data[f"{tag}/param/{k}"]
            if list(arr.shape) != entry["shapes"][k]:
                raise ValueError(f"{path}: shape mismatch for {k}")
            model.params[k] = arr.copy()
        opt = None
        if "optimizer" in entry:
            o = entry["optimizer"]
            opt = RMSProp(lr=o["lr"], rho=o["rho"], eps=o["eps"])
            opt.steps = o["steps"]
            prefix = f"{tag}/rmsprop/"
            for key in data.files:
                if key.startswith(prefix):
                    opt.square_avg[key[len(prefix):]] = data[key].copy()
    return model, opt, entry["meta"]
