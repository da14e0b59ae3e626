"""Central finite-difference verification of every recorded backward rule."""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

import tensor as T
from backbone import BackboneConfig, basic_block, init_basic_block
from encoding import LemConfig, aggregate, assign_weights, init_codebook, init_lem, lem_forward
from layers import learnable
from network import MulterConfig, init_multer, multer_forward
from tensor import Tape, Tensor
from training import cross_entropy_loss

DEFAULT_EPS = 1e-5
TOLERANCE = 1e-4
SEED_COUNT = 10
# one-sided slopes further apart than this (relative) mark a ReLU/max-pool switch
KINK_TOLERANCE = 1e-3


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`` for every element of ``x``."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grad = np.zeros_like(x.data)
    for index in np.ndindex(*x.shape):
        original = x.data[index]
        x.data[index] = original + eps
        f_plus = _scalar(f(x))
        x.data[index] = original - eps
        f_minus = _scalar(f(x))
        x.data[index] = original
        grad[index] = (f_plus - f_minus) / (2 * eps)
    return grad


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, reference: np.ndarray | None = None
) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)``.

    The floor is 1e-3 of the largest gradient in ``reference`` (default
    ``analytic``) and at least 1e-8, so near-zero entries are judged against
    the tensor's gradient scale.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    reference = analytic if reference is None else np.asarray(reference)
    floor = max(1e-3 * float(np.abs(reference).max()), 1e-8)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


@dataclass(frozen=True)
class GradcheckResult:
    suite: str
    max_error: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < TOLERANCE


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    rng: np.random.Generator,
    eps: float = DEFAULT_EPS,
    samples_per_tensor: int | None = None,
) -> tuple[float, int, int]:
    """Compare backward() against central differences; returns (max error, checked, skipped)."""
    with Tape() as tape:
        loss = loss_fn()
    T.zero_grad(tensors.values())
    T.backward(loss, tape)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    base = _scalar(loss_fn())
    worst, checked, skipped = 0.0, 0, 0
    for name, t in tensors.items():
        flat_indices = np.arange(t.size)
        if samples_per_tensor is not None and t.size > samples_per_tensor:
            flat_indices = rng.choice(t.size, size=samples_per_tensor, replace=False)

        picked, numeric = [], []
        for flat in flat_indices:
            index = np.unravel_index(int(flat), t.shape)
            original = t.data[index]
            t.data[index] = original + eps
            f_plus = _scalar(loss_fn())
            t.data[index] = original - eps
            f_minus = _scalar(loss_fn())
            t.data[index] = original

            central = (f_plus - f_minus) / (2 * eps)
            forward, backward_ = (f_plus - base) / eps, (base - f_minus) / eps
            if abs(forward - backward_) > KINK_TOLERANCE * max(1.0, abs(central)):
                skipped += 1
                continue
            picked.append(analytic[name][index])
            numeric.append(central)

        if picked:
            err = max_relative_error(np.array(picked), np.array(numeric), reference=analytic[name])
            if err >= TOLERANCE:
                logging.debug(f"Gradient mismatch on '{name}'", extra={"error": err})
            worst = max(worst, err)
            checked += len(picked)
    return worst, checked, skipped


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return learnable(rng.standard_normal(shape))


# Each case builds (loss_fn, tensors[, samples_per_tensor]) from a seeded rng.


def _case_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    return lambda: T.reduce_sum(T.mul(T.matmul(a, b), Tensor(w))), {"a": a, "b": b}


def _case_conv2d(rng):
    x, k = _param(rng, 1, 2, 5, 5), _param(rng, 3, 2, 3, 3)
    w = rng.standard_normal((1, 3, 3, 3))
    return lambda: T.reduce_sum(T.mul(T.conv2d(x, k, stride=2, pad=1), Tensor(w))), {"x": x, "k": k}


def _case_max_pool2d(rng):
    x = _param(rng, 1, 2, 5, 5)
    w = rng.standard_normal((1, 2, 3, 3))
    return lambda: T.reduce_sum(T.mul(T.max_pool2d(x, 3, 2, 1), Tensor(w))), {"x": x}


def _case_softmax(rng):
    x = _param(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return lambda: T.reduce_sum(T.mul(T.softmax(x), Tensor(w))), {"x": x}


def _bn_case(rng, shape, mode):
    x = _param(rng, *shape)
    features = shape[1]
    gamma, beta = _param(rng, features), _param(rng, features)
    mean = rng.standard_normal(features)
    var = rng.uniform(0.5, 2.0, features)
    w = rng.standard_normal(shape)

    def loss():
        out = T.batch_norm(x, gamma, beta, mean.copy(), var.copy(), mode)
        return T.reduce_sum(T.mul(out, Tensor(w)))

    return loss, {"x": x, "gamma": gamma, "beta": beta}


def _case_batch_norm_train(rng):
    return _bn_case(rng, (4, 3), "train")


def _case_batch_norm_spatial(rng):
    return _bn_case(rng, (2, 2, 3, 3), "train")


def _case_batch_norm_eval(rng):
    return _bn_case(rng, (4, 3), "eval")


def _case_global_avg_pool(rng):
    x = _param(rng, 2, 3, 3, 3)
    w = rng.standard_normal((2, 3))
    return lambda: T.reduce_sum(T.mul(T.global_avg_pool(x), Tensor(w))), {"x": x}


def _case_outer_product(rng):
    a, b = _param(rng, 3, 2), _param(rng, 3, 3)
    w = rng.standard_normal((3, 6))
    return lambda: T.reduce_sum(T.mul(T.outer_product(a, b), Tensor(w))), {"a": a, "b": b}


def _case_relu(rng):
    x = _param(rng, 4, 5)
    w = rng.standard_normal((4, 5))
    return lambda: T.reduce_sum(T.mul(T.relu(x), Tensor(w))), {"x": x}


def _case_add(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    w = rng.standard_normal((3, 4))
    return lambda: T.reduce_sum(T.mul(T.add(a, b), Tensor(w))), {"a": a, "b": b}


def _case_sub(rng):
    a, b = _param(rng, 2, 1, 3), _param(rng, 1, 4, 3)
    w = rng.standard_normal((2, 4, 3))
    return lambda: T.reduce_sum(T.mul(T.sub(a, b), Tensor(w))), {"a": a, "b": b}


def _case_mul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 1)
    return lambda: T.reduce_sum(T.mul(T.mul(a, b), a)), {"a": a, "b": b}


def _case_scale(rng):
    x = _param(rng, 4, 3)
    w = rng.standard_normal((4, 3))
    return lambda: T.reduce_sum(T.mul(T.scale(x, -2.5), Tensor(w))), {"x": x}


def _case_softplus(rng):
    x = _param(rng, 4, 3)
    w = rng.standard_normal((4, 3))
    return lambda: T.reduce_sum(T.mul(T.softplus(x), Tensor(w))), {"x": x}


def _case_reductions(rng):
    x = _param(rng, 3, 4, 2)
    w1, w2 = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    return (
        lambda: T.add(
            T.reduce_sum(T.mul(T.reduce_sum(x, axis=1), Tensor(w1))),
            T.reduce_sum(T.mul(T.mean(x, axis=0), Tensor(w2))),
        ),
        {"x": x},
    )


def _case_reshape_transpose(rng):
    x = _param(rng, 2, 3, 4)
    w = rng.standard_normal((4, 6))
    return (
        lambda: T.reduce_sum(T.mul(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)), Tensor(w))),
        {"x": x},
    )


def _case_concat_split(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 5)
    w1, w2 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))

    def loss():
        left, right = T.split(T.concat([a, b], axis=1), [4, 4], axis=1)
        return T.add(T.reduce_sum(T.mul(left, Tensor(w1))), T.reduce_sum(T.mul(T.mul(right, right), Tensor(w2))))

    return loss, {"a": a, "b": b}


def _case_cross_entropy(rng):
    logits = _param(rng, 2, 3)
    labels = rng.integers(0, 3, size=2)
    return lambda: cross_entropy_loss(logits, labels), {"logits": logits}


def _case_residual_encoding(rng):
    x = _param(rng, 2, 5, 3)
    codebook = init_codebook(rng, 4, 3)
    w = rng.standard_normal((2, 4, 3))

    def loss():
        weights = assign_weights(x, codebook)
        return T.reduce_sum(T.mul(aggregate(x, codebook, weights), Tensor(w)))

    return loss, {"x": x, "codewords": codebook.codewords, "smoothing": codebook.smoothing}


def _case_lem(rng):
    params = init_lem(LemConfig(channels=4, num_codewords=3, branch_dim=2, out_dim=5), rng)
    fmap = _param(rng, 2, 4, 3, 3)
    w = rng.standard_normal((2, 5))
    tensors = {"fmap": fmap, **dict(params.named_parameters("lem"))}
    return lambda: T.reduce_sum(T.mul(lem_forward(fmap, params, "train"), Tensor(w))), tensors


def _case_basic_block(rng):
    block = init_basic_block(rng, 2, 3, stride=2)
    x = _param(rng, 2, 2, 4, 4)
    w = rng.standard_normal((2, 3, 2, 2))
    tensors = {"x": x, **dict(block.named_parameters("block"))}
    return lambda: T.reduce_sum(T.mul(basic_block(x, block, 2, "train"), Tensor(w))), tensors


def _case_network(rng):
    config = MulterConfig(
        backbone=BackboneConfig(stem_channels=4, widths=(4, 8, 8, 8)),
        num_codewords=2,
        out_dim=6,
        branch_dim=2,
        num_classes=3,
    )
    params = init_multer(config, rng)
    image = _param(rng, 4, 3, 32, 32)
    labels = rng.integers(0, 3, size=4)
    tensors = {"image": image, **params.parameters()}
    return lambda: cross_entropy_loss(multer_forward(image, params, "train"), labels), tensors, 2


SUITES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "max_pool2d": _case_max_pool2d,
    "softmax": _case_softmax,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_spatial": _case_batch_norm_spatial,
    "batch_norm_eval": _case_batch_norm_eval,
    "global_avg_pool": _case_global_avg_pool,
    "outer_product": _case_outer_product,
    "relu": _case_relu,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "softplus": _case_softplus,
    "reductions": _case_reductions,
    "reshape_transpose": _case_reshape_transpose,
    "concat_split": _case_concat_split,
    "cross_entropy": _case_cross_entropy,
    "residual_encoding": _case_residual_encoding,
    "lem": _case_lem,
    "basic_block": _case_basic_block,
    "network": _case_network,
}


def run_suite(name: str, seeds: Iterable[int] = range(SEED_COUNT), eps: float = DEFAULT_EPS) -> GradcheckResult:
    start = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        case = SUITES[name](rng)
        loss_fn, tensors = case[0], case[1]
        samples = case[2] if len(case) > 2 else None
        err, n_checked, n_skipped = check_gradients(loss_fn, tensors, rng, eps, samples)
        worst = max(worst, err)
        checked += n_checked
        skipped += n_skipped
    result = GradcheckResult(name, worst, checked, skipped, time.perf_counter() - start)
    logging.debug(
        f"Gradcheck suite {name}: max error {worst:.3e}",
        extra={"checked": checked, "skipped": skipped, "seconds": result.seconds},
    )
    return result


def run_suites(names: Iterable[str] | None = None, seeds: Iterable[int] = range(SEED_COUNT)) -> list[GradcheckResult]:
    seeds = list(seeds)
    return [run_suite(name, seeds) for name in (names or SUITES)]
