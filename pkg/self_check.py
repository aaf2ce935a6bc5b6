"""
PA-EWC Desk Lab - Self-Check Suite

Fast verification of the whole lab: finite-difference checks of every backward
rule and of the composite loss under each method, closed-form oracles for the
loss, importance and metric formulas, and a handful of invariants.

Each check prints one ✅/❌ line; any failure makes the CLI exit with status 1.
"""

import json
import logging
import math
import tempfile
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from checkpoint_io import load_checkpoint, save_checkpoint, encode_arrays, decode_arrays
from fisher_adaptive import (
    ActivationStats, FisherSnapshot, adaptive_weight, empirical_fisher, stability_factor, task_similarity,
)
from metrics_eval import dice_coeff, forgetting_rate
from objectives import LossWeights, dice_loss, ewc_penalty, seg_ce, total_loss
from param_classifier import ResponseMatrix, classify
from prompt_taxonomy import Vocabulary, complexity, generate_prompt
from tensor_autodiff import (
    Tape, Tensor, concat, embedding, finite_diff_check, transpose, upsample_nearest,
)
from toy_model import GROUPS, ModelConfig, SegLogits, build_model, forward

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-6
DEFAULT_FIXTURES = 100
ORACLE_TOLERANCE = 1e-9
FUZZ_DRAWS = 1000


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


CheckFn = Callable[[int], Tuple[bool, str]]
CHECKS: "OrderedDict[str, CheckFn]" = OrderedDict()


def check(name: str):
    def register(fn: CheckFn) -> CheckFn:
        CHECKS[name] = fn
        return fn
    return register


def _close(actual: float, expected: float, tol: float = ORACLE_TOLERANCE) -> bool:
    return abs(actual - expected) <= tol


# ---------------------------------------------------------------------------
# Gradient checks, one per backward rule
# ---------------------------------------------------------------------------

def _leaf(rng, shape, low=-1.0, high=1.0, name="a") -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


def _away_from_zero(rng, shape) -> Tensor:
    values = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(values, requires_grad=True, name="a")


def _op_case(op: str, rng) -> Tuple[Dict[str, Tensor], Callable]:
    """Leaves plus a map from leaves to the op's output for one backward rule"""
    a = _leaf(rng, (3, 4))
    if op == "add":
        b = _leaf(rng, (4,), name="b")
        return {"a": a, "b": b}, lambda p: p["a"] + p["b"]
    if op == "sub":
        b = _leaf(rng, (3, 1), name="b")
        return {"a": a, "b": b}, lambda p: p["a"] - p["b"]
    if op == "mul":
        b = _leaf(rng, (3, 4), name="b")
        return {"a": a, "b": b}, lambda p: p["a"] * p["b"]
    if op == "div":
        b = _leaf(rng, (3, 4), 0.5, 2.0, name="b")
        return {"a": a, "b": b}, lambda p: p["a"] / p["b"]
    if op == "neg":
        return {"a": a}, lambda p: -p["a"]
    if op == "matmul":
        a = _leaf(rng, (2, 3, 4))
        b = _leaf(rng, (4, 5), name="b")
        return {"a": a, "b": b}, lambda p: p["a"] @ p["b"]
    if op == "power":
        a = _leaf(rng, (3, 4), 0.5, 1.5)
        return {"a": a}, lambda p: p["a"] ** 3.0
    if op == "relu":
        a = _away_from_zero(rng, (3, 4))
        return {"a": a}, lambda p: p["a"].relu()
    if op == "sigmoid":
        return {"a": a}, lambda p: p["a"].sigmoid()
    if op == "exp":
        return {"a": a}, lambda p: p["a"].exp()
    if op == "log":
        a = _leaf(rng, (3, 4), 0.5, 2.0)
        return {"a": a}, lambda p: p["a"].log()
    if op == "softmax":
        return {"a": a}, lambda p: p["a"].softmax(axis=1)
    if op == "log_softmax":
        return {"a": a}, lambda p: p["a"].log_softmax(axis=0)
    if op == "sum":
        return {"a": a}, lambda p: p["a"].sum(axis=0)
    if op == "mean":
        return {"a": a}, lambda p: p["a"].mean(axis=1, keepdims=True)
    if op == "reshape":
        return {"a": a}, lambda p: p["a"].reshape(2, 6)
    if op == "transpose":
        a = _leaf(rng, (2, 3, 4))
        return {"a": a}, lambda p: transpose(p["a"], (1, 2, 0))
    if op == "concat":
        b = _leaf(rng, (2, 4), name="b")
        return {"a": a, "b": b}, lambda p: concat([p["a"], p["b"]], axis=0)
    if op == "embedding":
        table = _leaf(rng, (6, 3), name="table")
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        return {"table": table}, lambda p: embedding(p["table"], ids)
    if op == "getitem":
        a = _leaf(rng, (4, 5))
        return {"a": a}, lambda p: p["a"][1:3, ::2]
    if op == "upsample_nearest":
        a = _leaf(rng, (2, 2, 3))
        return {"a": a}, lambda p: upsample_nearest(p["a"], 2)
    raise KeyError(op)


GRADIENT_OPS = ("add", "sub", "mul", "div", "neg", "matmul", "power", "relu", "sigmoid", "exp", "log",
                "softmax", "log_softmax", "sum", "mean", "reshape", "transpose", "concat", "embedding",
                "getitem", "upsample_nearest")


def _gradient_check(op: str) -> CheckFn:
    def run(fixtures: int) -> Tuple[bool, str]:
        worst = 0.0
        for seed in range(max(1, fixtures)):
            rng = np.random.default_rng(seed)
            leaves, fn = _op_case(op, rng)
            with Tape():
                probe = fn(leaves)
            weights = Tensor(rng.uniform(-1.0, 1.0, size=probe.shape))
            error = finite_diff_check(lambda p: (fn(p) * weights).sum(), leaves, abs_floor=1e-8)
            worst = max(worst, error)
        return worst <= GRADIENT_TOLERANCE, f"max relative error {worst:.2e}"
    return run


for _op in GRADIENT_OPS:
    CHECKS[f"gradient:{_op}"] = _gradient_check(_op)


# ---------------------------------------------------------------------------
# Composite loss fixtures
# ---------------------------------------------------------------------------

FIXTURE_MODEL = ModelConfig(image_size=8, channels=3, patch_size=4, embed_dim=4, vocab_size=128, n_heads=2)
# Random coordinates compared per total-loss fixture
FIXTURE_COORDS = 12


def loss_fixture(seed: int, method: str, cfg: ModelConfig = FIXTURE_MODEL):
    """
    Small random model, batch and (for EWC methods) one snapshot

    Returns:
        (params, objective) where objective(params) -> differentiable total loss tensor
    """
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.default()
    params = build_model(cfg, seed)
    images = rng.uniform(0.0, 1.0, size=(2, cfg.channels, cfg.image_size, cfg.image_size))
    masks = (rng.uniform(size=(2, cfg.image_size, cfg.image_size)) > 0.5).astype(np.float64)
    masks[:, 0, 0] = 1.0
    tokens = [vocab.encode(generate_prompt("comprehensive", task_id, rng=rng).text) for task_id in (1, 4)]
    weights = LossWeights()

    snapshots = []
    if method != "sequential":
        if method == "general_ewc":
            group_of = {name: "unassigned" for name in params.names}
            group_weight = {"unassigned": 1.0}
        else:
            group_of = {name: GROUPS[int(rng.integers(3))] for name in params.names}
            group_weight = {group: float(rng.uniform(0.5, 2.0)) for group in GROUPS}
        snapshots.append(FisherSnapshot(
            task_id=0,
            per_block_fisher={n: rng.uniform(0.0, 1.0, size=t.shape) for n, t in params.items()},
            anchor={n: t.data + rng.normal(0.0, 0.005, size=t.shape) for n, t in params.items()},
            group_of=group_of, group_weight=group_weight, stability={}, similarity=1.0, complexity=0.0,
            method=method,
        ))

    def objective(p):
        logits = forward(p, images, tokens)
        ewc = Tensor(0.0) if method == "sequential" else ewc_penalty(p, snapshots)
        return total_loss(seg_ce(logits, masks), dice_loss(logits, masks, weights.epsilon), ewc, weights).graph

    return params, objective


def _total_loss_check(method: str) -> CheckFn:
    def run(fixtures: int) -> Tuple[bool, str]:
        worst = 0.0
        for seed in range(max(1, fixtures)):
            params, objective = loss_fixture(seed, method)
            error = finite_diff_check(objective, params, h=1e-5, abs_floor=1e-4, max_coords=FIXTURE_COORDS,
                                      rng=np.random.default_rng(seed))
            worst = max(worst, error)
        return worst <= GRADIENT_TOLERANCE, f"{max(1, fixtures)} fixtures, max relative error {worst:.2e}"
    return run


for _method in ("sequential", "general_ewc", "pa_ewc"):
    CHECKS[f"gradient:total_loss[{_method}]"] = _total_loss_check(_method)


# ---------------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------------

@check("oracle:complexity")
def _complexity_oracle(_fixtures):
    values = [complexity(["polyp"]).value, complexity(["the image"]).value,
              complexity(["pink round polyp located in center"]).value]
    return values == [4.0, 2.0, 18.0], f"got {values}"


@check("oracle:seg_ce")
def _seg_ce_oracle(_fixtures):
    uniform = seg_ce(SegLogits(Tensor(np.zeros((1, 2, 2, 2)))), np.ones((1, 2, 2))).item()
    wrong = seg_ce(SegLogits(Tensor(np.array([2.0, 0.0]).reshape(1, 2, 1, 1))), np.ones((1, 1, 1))).item()
    ok = _close(uniform, math.log(2.0)) and _close(wrong, math.log(1.0 + math.e ** 2))
    return ok, f"uniform {uniform:.12f}, gap-2 {wrong:.12f}"


@check("oracle:dice_loss")
def _dice_oracle(_fixtures):
    big = 50.0
    fg = np.array([1, 1, 0, 0], dtype=np.float64)
    logits = np.stack([np.where(fg > 0, -big, big), np.where(fg > 0, big, -big)]).reshape(1, 2, 1, 4)
    value = dice_loss(SegLogits(Tensor(logits)), np.array([[[1.0, 0.0, 0.0, 0.0]]])).item()
    return abs(value - (1.0 - 2.0 / 3.0)) < 1e-6, f"got {value:.9f}"


@check("oracle:ewc_penalty")
def _ewc_oracle(_fixtures):
    params = {"w": Tensor([3.0], requires_grad=True, name="w")}
    snapshot = FisherSnapshot(task_id=1, per_block_fisher={"w": np.array([1.0])}, anchor={"w": np.array([1.0])},
                              group_of={"w": "visual"}, group_weight={"visual": 1.0}, stability={},
                              similarity=1.0, complexity=0.0)
    single = ewc_penalty(params, [snapshot]).item()
    double = ewc_penalty(params, [snapshot, snapshot]).item()
    return single == 4.0 and double == 8.0, f"single {single}, double {double}"


@check("oracle:total_loss")
def _total_oracle(_fixtures):
    breakdown = total_loss(Tensor(1.0), Tensor(1.0), Tensor(0.1), LossWeights())
    return _close(breakdown.total, 2.3), f"got {breakdown.total}"


@check("oracle:fisher")
def _fisher_oracle(_fixtures):
    fisher = empirical_fisher([{"a": np.array([1.0]), "b": np.array([3.0])},
                               {"a": np.array([3.0]), "b": np.array([1.0])}])
    ok = fisher["a"][0] == 5.0 and fisher["b"][0] == 5.0
    return ok, f"got a={fisher['a'][0]}, b={fisher['b'][0]}"


@check("oracle:stability")
def _stability_oracle(_fixtures):
    values = stability_factor({"same": [1.5, 1.5, 1.5], "spread": [0.0, 2.0]})
    ok = _close(values["same"], 0.5) and _close(values["spread"], 1.0 / (1.0 + math.e))
    return ok, f"got {values}"


@check("oracle:similarity")
def _similarity_oracle(_fixtures):
    prev = ActivationStats(per_layer=((0.0, 0.0), (1.0, 1.0)), layers=("x", "y"))
    cur = ActivationStats(per_layer=((1.0, 1.0), (1.0, 1.0)), layers=("x", "y"))
    value = task_similarity(prev, cur)
    return _close(value, 2.0 / 3.0) and _close(task_similarity(cur, cur), 1.0), f"got {value}"


@check("oracle:adaptive_weight")
def _weight_oracle(_fixtures):
    value = adaptive_weight(3.0, 4.0, 18.0)
    return _close(value, 3.0 * (1.0 + 4.0 / 18.0)), f"got {value}"


@check("oracle:dice_coeff")
def _dice_coeff_oracle(_fixtures):
    pred = np.array([1, 1, 0, 0])
    gt = np.array([0, 1, 1, 0])
    values = (dice_coeff(pred, gt), dice_coeff(pred, pred), dice_coeff(np.zeros(4), np.zeros(4)))
    return values == (0.5, 1.0, 1.0), f"got {values}"


@check("oracle:forgetting")
def _forgetting_oracle(_fixtures):
    result = forgetting_rate([[0.9, 0.1, 0.0], [0.85, 0.7, 0.0], [0.8, 0.6, 0.9]])
    ok = _close(result.forgetting_total, 0.2) and _close(result.per_task_forgetting[0], 0.1)
    return ok, f"total {result.forgetting_total:.12f}"


@check("oracle:finite_diff")
def _finite_diff_oracle(_fixtures):
    weight = {"w": Tensor([1.0], requires_grad=True, name="w")}
    square = finite_diff_check(lambda p: (p["w"] * p["w"]).sum(), weight)
    rng = np.random.default_rng(11)
    logits = {"z": Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, name="z")}
    mask = (rng.uniform(size=(1, 4, 4)) > 0.5).astype(np.float64)
    dice = finite_diff_check(lambda p: dice_loss(SegLogits(p["z"]), mask), logits)
    return square < 1e-8 and dice < 1e-6, f"w^2 {square:.1e}, dice loss {dice:.1e}"


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

@check("invariant:ewc_anchor")
def _anchor_invariant(fixtures):
    worst_value = worst_grad = 0.0
    for seed in range(max(1, fixtures)):
        rng = np.random.default_rng(seed)
        params = build_model(FIXTURE_MODEL, seed)
        snapshot = FisherSnapshot(
            task_id=1, per_block_fisher={n: rng.uniform(0.0, 1000.0, size=t.shape) for n, t in params.items()},
            anchor=params.snapshot_values(), group_of={n: GROUPS[i % 3] for i, n in enumerate(params.names)},
            group_weight={g: float(rng.uniform(1.0, 50.0)) for g in GROUPS}, stability={}, similarity=1.0,
            complexity=0.0)
        with Tape() as tape:
            penalty = ewc_penalty(params, [snapshot])
        grads = tape.backward(penalty, params)
        worst_value = max(worst_value, abs(penalty.item()))
        worst_grad = max(worst_grad, max(float(np.abs(g).max()) for g in grads.values()))
    return worst_value == 0.0 and worst_grad <= 1e-9, f"penalty {worst_value}, max |grad| {worst_grad:.1e}"


@check("invariant:ranges")
def _range_invariant(_fixtures):
    rng = np.random.default_rng(7)
    for _ in range(FUZZ_DRAWS):
        samples = rng.exponential(rng.uniform(0.01, 3.0), size=int(rng.integers(2, 10)))
        s = stability_factor({"g": samples})["g"]
        if not 0.0 < s <= 0.5:
            return False, f"stability {s} outside (0, 0.5]"
        layers = int(rng.integers(1, 5))
        a = ActivationStats(per_layer=tuple((rng.normal(), rng.uniform(0, 3)) for _ in range(layers)))
        b = ActivationStats(per_layer=tuple((rng.normal(), rng.uniform(0, 3)) for _ in range(layers)))
        similarity = task_similarity(a, b)
        if not 0.0 < similarity <= 1.0 or similarity != task_similarity(b, a):
            return False, f"similarity {similarity} outside (0, 1] or asymmetric"
        p = rng.integers(0, 2, size=(4, 4))
        g = rng.integers(0, 2, size=(4, 4))
        d = dice_coeff(p, g)
        if not 0.0 <= d <= 1.0 or d != dice_coeff(g, p):
            return False, f"dice {d} outside [0, 1] or asymmetric"
        logits = SegLogits(Tensor(rng.normal(0.0, 5.0, size=(2, 2, 3, 3))))
        loss = dice_loss(logits, rng.integers(0, 2, size=(2, 3, 3)).astype(np.float64)).item()
        if not 0.0 <= loss <= 1.0 + 1e-6:
            return False, f"dice_loss {loss} outside [0, 1 + 1e-6]"
        fisher = empirical_fisher([{"w": rng.normal(0.0, 10.0, size=5)} for _ in range(3)])["w"]
        if fisher.min() < 0.0:
            return False, f"negative Fisher entry {fisher.min()}"
    return True, f"{FUZZ_DRAWS} random draws"


@check("invariant:classify")
def _classify_invariant(_fixtures):
    rng = np.random.default_rng(3)
    rows = tuple(f"block{i}" for i in range(12))
    matrix = ResponseMatrix(rows, rng.uniform(0.01, 1.0, size=(12, 3)))
    base = classify(matrix)
    scaled = classify(matrix.scaled(37.5))
    ties = classify(ResponseMatrix(("t1", "t2", "t3"), np.array([[0.5, 0.5, 0.2], [0.1, 0.4, 0.4], [0.3, 0.3, 0.3]])))
    ok = base == scaled and ties == {"t1": "visual", "t2": "spatial", "t3": "visual"}
    return ok, f"tie-break {ties}"


@check("invariant:checkpoint_roundtrip")
def _checkpoint_invariant(_fixtures):
    params = build_model(FIXTURE_MODEL, 43)
    with tempfile.TemporaryDirectory() as tmp:
        first = save_checkpoint(Path(tmp) / "a.ckpt", params, {"run": "check"})
        values, groups, meta = load_checkpoint(first)
        copy = params.copy()
        copy.load_values(values)
        copy.assign_groups(groups)
        second = save_checkpoint(Path(tmp) / "b.ckpt", copy, meta)
        identical = first.read_bytes() == second.read_bytes()
    kind, arrays, _ = decode_arrays(encode_arrays("params", OrderedDict(x=(np.arange(3.0), "visual"))))
    return identical and kind == "params" and arrays["x"][0].tolist() == [0.0, 1.0, 2.0], \
        f"bytes identical: {identical}"


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def run_checks(fixtures: int = DEFAULT_FIXTURES, names: Optional[List[str]] = None) -> List[CheckResult]:
    """Run the registered checks (all by default) and collect their results"""
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        started = time.time()
        try:
            passed, detail = fn(fixtures)
        except Exception as e:
            logger.error(f"Check {name} raised: {e}")
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        results.append(CheckResult(name=name, passed=bool(passed), detail=detail, seconds=time.time() - started))
    return results


def print_results(results: List[CheckResult], as_json: bool = False) -> bool:
    """Print one line per check (or a JSON document); returns True when all passed"""
    success = all(r.passed for r in results)
    if as_json:
        print(json.dumps({"passed": success, "checks": [asdict(r) for r in results]}, indent=2, sort_keys=True))
        return success

    print("=" * 60)
    print("PA-EWC SELF-CHECK")
    print("=" * 60)
    for r in results:
        mark = "✅" if r.passed else "❌"
        print(f"{mark} {r.name} - {'OK' if r.passed else 'FAILED'} ({r.detail})")
    print("-" * 60)
    failed = [r.name for r in results if not r.passed]
    if success:
        print(f"🎉 ALL {len(results)} CHECKS PASSED")
    else:
        print(f"❌ {len(failed)} OF {len(results)} CHECKS FAILED: {', '.join(failed)}")
    return success
