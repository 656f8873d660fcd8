"""Gradient-check suite: every primitive, one double block, the full siamese loss."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .model import MaTcnConfig, double_block, init_params, mhsa_layer, time_aggregate
from .preprocess import GridSequence, pad_and_mask
from .siamese import DriverInput, PairExample, SiameseConfig, bce_with_logits, collate, init_siamese, pair_loss
from .tensor import Tensor


def _contract(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Reduce ``out`` to a scalar through fixed random weights so every entry matters."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.sum(out * w)


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, dict, callable]]:
    """(label, params, f) triples for each differentiable primitive."""
    mask = np.array([[True, True, True, False], [True, True, False, False]])
    idx = np.array([[0, 2, 1], [3, 3, 0]])
    steps = np.array([2, 0])
    y = np.array([0.0, 1.0, 1.0])
    cases = [
        ("add", {"a": _leaf(rng, 3, 4), "b": _leaf(rng, 4)}, lambda p: _contract(p["a"] + p["b"])),
        ("sub", {"a": _leaf(rng, 3, 4), "b": _leaf(rng, 3, 1)}, lambda p: _contract(p["a"] - p["b"])),
        ("mul", {"a": _leaf(rng, 3, 4), "b": _leaf(rng, 3, 4)}, lambda p: _contract(p["a"] * p["b"])),
        ("matmul", {"a": _leaf(rng, 3, 4), "b": _leaf(rng, 4, 2)}, lambda p: _contract(p["a"] @ p["b"])),
        ("matmul_batched", {"a": _leaf(rng, 2, 3, 4), "b": _leaf(rng, 4, 2)},
         lambda p: _contract(p["a"] @ p["b"])),
    ]
    for name in ("tanh", "sigmoid", "gelu", "exp"):
        cases.append((name, {"x": _leaf(rng, 3, 5)}, lambda p, n=name: _contract(T.elementwise(n, p["x"]))))
    # Keep relu inputs away from the kink so differences stay one-sided.
    relu_x = rng.normal(size=(3, 5))
    relu_x += np.sign(relu_x) * 0.1
    cases += [
        ("relu", {"x": Tensor(relu_x, requires_grad=True)}, lambda p: _contract(T.relu(p["x"]))),
        ("reshape_swapaxes", {"x": _leaf(rng, 2, 3, 4)},
         lambda p: _contract(T.swapaxes(T.reshape(p["x"], (6, 4)), 0, 1))),
        ("concat_stack", {"a": _leaf(rng, 2, 3), "b": _leaf(rng, 2, 3)},
         lambda p: _contract(T.stack([T.concat([p["a"], p["b"]], axis=1), T.concat([p["b"], p["a"]], axis=1)]))),
        ("getitem", {"x": _leaf(rng, 4, 3)}, lambda p: _contract(p["x"][1:3] + p["x"][[0, 0]][:2])),
        ("sum_mean", {"x": _leaf(rng, 3, 4)},
         lambda p: _contract(T.sum(p["x"], axis=1)) + T.mean(p["x"] * p["x"])),
        ("masked_softmax", {"x": _leaf(rng, 2, 4)}, lambda p: _contract(T.masked_softmax(p["x"], mask))),
        ("depthwise_causal_conv1d", {"x": _leaf(rng, 2, 3, 7), "k": _leaf(rng, 3, 3)},
         lambda p: _contract(T.depthwise_causal_conv1d(p["x"], p["k"], 2))),
        ("pointwise_conv", {"x": _leaf(rng, 2, 3, 5), "w": _leaf(rng, 4, 3), "b": _leaf(rng, 4)},
         lambda p: _contract(T.pointwise_conv(p["x"], p["w"], p["b"]))),
        ("gather_rows", {"table": _leaf(rng, 5, 3)}, lambda p: _contract(T.gather_rows(p["table"], idx))),
        ("select_step", {"x": _leaf(rng, 2, 3, 4)}, lambda p: _contract(T.select_step(p["x"], steps))),
        ("bce_with_logits", {"z": _leaf(rng, 3, scale=2.0)}, lambda p: bce_with_logits(p["z"], y)),
        ("mhsa_layer", {"x": _leaf(rng, 2, 4, 8), "wq": _leaf(rng, 8, 8, scale=0.4),
                        "wk": _leaf(rng, 8, 8, scale=0.4), "wv": _leaf(rng, 8, 8, scale=0.4),
                        "wo": _leaf(rng, 8, 8, scale=0.4)},
         lambda p: _contract(mhsa_layer(p["x"], mask, p["wq"], p["wk"], p["wv"], p["wo"], 2)[0])),
        ("time_aggregate", {"h": _leaf(rng, 2, 3, 4), "w": _leaf(rng, 3, 3)},
         lambda p: _contract(time_aggregate(p["h"], mask, np.array([3, 2]), p["w"])[0])),
    ]
    return cases


def _random_seq(rng: np.random.Generator, n: int, vocab: int = 8) -> GridSequence:
    cells = np.stack([rng.integers(0, vocab, n), rng.integers(0, vocab, n), rng.integers(1, 289, n),
                      rng.uniform(0.0, 20.0, n)], axis=1)
    return GridSequence.from_cells(cells.tolist())


def _tiny_pair_batch(rng: np.random.Generator, vocab: int):
    def side():
        return DriverInput(_random_seq(rng, int(rng.integers(4, 9)), vocab),
                           _random_seq(rng, int(rng.integers(4, 9)), vocab), rng.normal(size=12))

    return collate([PairExample(side(), side(), 0), PairExample(side(), side(), 1)])


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-3, model_entries: int = 3,
                        cfg: SiameseConfig | None = None) -> list[GradCheckReport]:
    """Primitives exhaustively; the double block and siamese loss on sampled entries.

    The model-level checks use the default architecture unless ``cfg`` is
    given, with ``model_entries`` random entries differenced per tensor.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for label, params, f in primitive_cases(rng):
        reports.append(grad_check(f, params, step=1e-5, tol=tol, label=label))

    cfg = cfg or SiameseConfig(lat_vocab=8, lon_vocab=8)
    block_cfg = MaTcnConfig(**{k: getattr(cfg, k) for k in MaTcnConfig.field_names()})
    p = init_params(block_cfg, rng)
    level = min(2, block_cfg.n_blocks)
    block_params = {k: v for k, v in p.items() if k.startswith(f"block{level}.") and ".agg" not in k}
    batch = pad_and_mask([_random_seq(rng, 9), _random_seq(rng, 5)])
    block_params["x"] = Tensor(rng.normal(size=(2, cfg.d, batch.max_len)), requires_grad=True)

    def block_loss(q):
        out = double_block(q, block_cfg, q["x"], batch.mask, level)[0]
        return _contract(out * Tensor(batch.mask[:, None, :].astype(np.float64)))

    reports.append(grad_check(block_loss, block_params, step=1e-4, tol=tol, label=f"double_block(level={level})",
                              max_entries=model_entries, seed=seed))

    sp = init_siamese(cfg, rng)
    pairs = _tiny_pair_batch(rng, cfg.lat_vocab)
    reports.append(grad_check(lambda q: pair_loss(q, cfg, pairs), sp, step=1e-4, tol=tol, label="siamese_loss",
                              max_entries=model_entries, seed=seed))
    return reports


def format_suite(reports: list[GradCheckReport], seconds: float | None = None) -> str:
    lines = []
    for r in reports:
        lines.extend(r.lines())
    n_fail = sum(not r.passed for r in reports)
    tail = f"{len(reports) - n_fail}/{len(reports)} checks passed"
    if seconds is not None:
        tail += f" in {seconds:.1f}s"
    lines.append(tail)
    return "\n".join(lines)


def timed_suite(**kwargs) -> tuple[list[GradCheckReport], float]:
    t0 = time.perf_counter()
    reports = run_gradcheck_suite(**kwargs)
    return reports, time.perf_counter() - t0
