"""Training: datasets, loss, optimizer, train loop, and evaluation.

Sketches learn from input/output stack pairs only. The loss is the
masked cross-entropy between the final data memory / pointer and the
target one-hots; optimization is Adam with per-entry Gaussian gradient
noise (variance eta / (1+t)^gamma) and global-norm clipping applied in
that order. Evaluation discretizes the machine state after every step,
which is what lets a correctly learned sketch run at any length.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import executor as ex
from . import interp
from . import machine as mc
from . import programs, slots
from .errors import ForthError, StepBudgetExceeded


@dataclass(frozen=True)
class Example:
    """One input/output stack pair (both bottom-to-top)."""

    inputs: tuple
    target: tuple
    aux: dict = field(default_factory=dict)


@dataclass
class OptimizerConfig:
    learning_rate: float = 1.0
    batch_size: int = 16
    clip_norm: float = 1.0
    noise_eta: float = 0.01
    noise_gamma: float = 0.55
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ForthError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ForthError("batch_size must be >= 1")


@dataclass(frozen=True)
class Task:
    name: str
    reference: str
    variants: dict


SORT = Task("sort", "sort_reference",
            {"compare": "sort_compare", "permute": "sort_permute"})
ADD = Task("add", "add_reference",
           {"choose": "add_choose", "manipulate": "add_manipulate"})
TASKS = {"sort": SORT, "add": ADD}


# ---------------------------------------------------------------------------
# datasets


def _sort_example(digits):
    n = len(digits)
    target = tuple(sorted(digits, reverse=True))  # largest at the stack bottom
    return Example(inputs=tuple(digits) + (n,), target=target, aux={"n": n})


def _add_example(a_digits, b_digits, carry):
    n = len(a_digits)
    a = int("".join(map(str, a_digits)) or "0")
    b = int("".join(map(str, b_digits)) or "0")
    total = a + b + carry
    result = [int(ch) for ch in str(total).zfill(n + 1)]
    if len(result) != n + 1:
        raise ForthError("carry overflowed the result width")
    interleaved = []
    for da, db in zip(a_digits, b_digits):
        interleaved.extend((da, db))
    return Example(inputs=tuple(interleaved) + (carry, n), target=tuple(result),
                   aux={"n": n, "carry": carry})


def gen_sort_dataset(length, count, seed, validate=True):
    """Uniform random digit sequences; target is the descending stack."""
    if length < 1:
        raise ForthError("sort length must be >= 1")
    rng = np.random.default_rng(seed)
    examples = [_sort_example(list(rng.integers(0, 10, size=length)))
                for _ in range(count)]
    if validate:
        validate_against_oracle(SORT, examples)
    return examples


def gen_add_dataset(num_digits, count, seed, validate=True):
    """Aligned digit pairs plus an initial carry sampled from {0, 1}."""
    if num_digits < 1:
        raise ForthError("num_digits must be >= 1")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(count):
        a = list(rng.integers(0, 10, size=num_digits))
        b = list(rng.integers(0, 10, size=num_digits))
        carry = int(rng.integers(0, 2))
        examples.append(_add_example(a, b, carry))
    if validate:
        validate_against_oracle(ADD, examples)
    return examples


def validate_against_oracle(task, examples):
    """Run every example through the slot-free reference interpreter."""
    program = programs.load(task.reference)
    for exm in examples:
        dims = task_dims(task, _example_len(task, exm))
        state = interp.initial_state(program, dims, data=exm.inputs)
        final, _ = interp.run_discrete(state, program, dims, max_steps=2_000_000)
        if tuple(final.D) != tuple(exm.target):
            raise ForthError("oracle disagrees on %s: got %s want %s"
                             % (exm.inputs, final.D, exm.target))


def _example_len(task, exm):
    return exm.aux["n"] if task.name == "sort" else 2 * exm.aux["n"]


# ---------------------------------------------------------------------------
# machine dimensions and step budgets


def _program_lengths(task):
    progs = [programs.load(task.reference)]
    progs += [programs.load(name) for name in task.variants.values()]
    return max(p.length for p in progs)


def task_dims(task, length, max_len=None):
    """Stack size for `length`; value size fixed by the task's ceiling.

    `length` is the input sequence length (sort: item count,
    add: 2 * digit count). v must cover program addresses, every
    literal, and every runtime value, and is shared between train and
    eval so slot weight shapes agree; l only needs to fit this length.
    """
    ceiling = max(length, max_len or 64)
    p_max = _program_lengths(task)
    if task.name == "sort":
        l = max(12, 2 * length + 6)
        v = max(10, p_max + 1, ceiling + 2)
    else:
        n = length // 2
        n_ceiling = ceiling // 2
        l = max(12, 2 * n + 8)
        v = max(39, p_max + 1, n_ceiling + 2)  # 2*(a+b+carry) <= 38 must not wrap
    return mc.MachineDims(l=l, v=v)


def step_budget(task, length, optimize=True, margin=1.25):
    """Plan steps the reference needs on a worst-length instance, padded.

    Sketch execution paths are length-locked by their counters, so the
    slot-free reference (whose slot-equivalent words take extra steps)
    bounds the sketch at the same optimization level.
    """
    program = programs.load(task.reference)
    dims = task_dims(task, length)
    plan = ex.build_plan(program, collapse=optimize, interp=optimize)
    if task.name == "sort":
        probe = _sort_example([i % 10 for i in range(length)])
    else:
        n = length // 2
        probe = _add_example([9] * n, [9] * n, 1)
    ctx = ex.make_context(plan, dims, batch=1)
    state = mc.state_from_stacks(dims, plan.width, [list(probe.inputs)], entry=plan.entry)
    cap = 4_000_000
    steps = 0
    cvals = ad.val(state.c)
    while cvals[0, plan.halt_index] < 0.5:
        state = ex.rnn_step(state, plan, ctx)
        state = ex.discretize(state)
        cvals = ad.val(state.c)
        steps += 1
        if steps > cap:
            raise StepBudgetExceeded("reference probe did not halt")
    return int(math.ceil(steps * margin))


# ---------------------------------------------------------------------------
# encoding and loss


def encode_batch(examples, dims, plan, batch_entry=None):
    entry = plan.entry if batch_entry is None else batch_entry
    stacks = [list(exm.inputs) for exm in examples]
    return mc.state_from_stacks(dims, plan.width, stacks, entry=entry)


def target_arrays(examples, dims):
    """(Y, K, y_ptr): one-hot target rows, row mask, target pointer."""
    B, l, v = len(examples), dims.l, dims.v
    Y = np.zeros((B * l, v))
    K = np.zeros((B * l, v))
    y_ptr = np.zeros((B, l))
    for b, exm in enumerate(examples):
        depth = len(exm.target)
        for row, value in enumerate(exm.target, start=1):
            Y[b * l + row, value] = 1.0
            K[b * l + row, :] = 1.0
        y_ptr[b, depth] = 1.0
    return Y, K, y_ptr


def loss(final_state, Y, K, y_ptr):
    """Masked cross-entropy on the data memory plus the pointer term.

    Rows are renormalized (clamped at 1e-12) before the log because
    RNN-step mixtures can drift off the simplex by rounding. Averaged
    over the batch.
    """
    B = final_state.batch
    ky = K * Y  # constant mask of target cells
    P = _renorm_rows(final_state.D)
    cell_term = ad.sum_all(ad.hadamard(ad.log(P), ky))
    dP = _renorm_rows(final_state.d)
    ptr_term = ad.sum_all(ad.hadamard(ad.log(dP), y_ptr))
    total = ad.add(cell_term, ptr_term)
    out = ad.scalarmul(-1.0 / B, total)
    if not np.isfinite(ad.val(out)):
        raise ForthError("non-finite loss")
    return out


def _renorm_rows(m):
    inv = ad.reciprocal(ad.row_sum(m))
    return ad.scale_rows(m, inv)


def hamming_accuracy(predicted, Y, K):
    """Percentage of masked stack cells whose argmax matches the target."""
    pred = ad.val(predicted.D) if hasattr(predicted, "D") else np.asarray(predicted)
    if pred.shape != Y.shape:
        raise ForthError("prediction shape %s does not match target %s"
                         % (pred.shape, Y.shape))
    rows = K.max(axis=1) > 0
    if not rows.any():
        raise ForthError("empty mask")
    hits = pred[rows].argmax(axis=1) == Y[rows].argmax(axis=1)
    return 100.0 * float(hits.mean())


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, store, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(v) for name, v in store.items()}
        self.v = {name: np.zeros_like(v) for name, v in store.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, value in self.store.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            self.store[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimize_step(adam, grads, config, step_index, rng):
    """Gradient noise, then global-norm clipping, then one Adam update."""
    sigma = math.sqrt(config.noise_eta / (1.0 + step_index) ** config.noise_gamma)
    noisy = {}
    for name in adam.store.names():
        g = grads[name]
        if sigma > 0:
            g = g + rng.normal(0.0, sigma, size=g.shape)
        noisy[name] = g
    norm = math.sqrt(sum(float((g * g).sum()) for g in noisy.values()))
    if norm > config.clip_norm:
        scale = config.clip_norm / norm
        noisy = {name: g * scale for name, g in noisy.items()}
    adam.step(noisy)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(store, program, plan, task, examples, length, budget=None,
             eval_batch=64, max_len=None):
    """Discretized accuracy of a sketch over a set of examples."""
    if not examples:
        raise ForthError("empty test set")
    dims = task_dims(task, length, max_len=max_len)
    if budget is None:
        budget = step_budget(task, length)
    params = store.bind(None)
    total_hits, total_cells = 0, 0
    pointer_ok = 0
    for lo in range(0, len(examples), eval_batch):
        chunk = examples[lo:lo + eval_batch]
        Y, K, y_ptr = target_arrays(chunk, dims)
        ctx = ex.make_context(plan, dims, params=params, batch=len(chunk))
        state = encode_batch(chunk, dims, plan)
        final, _, _ = ex.run(state, plan, ctx, steps=budget,
                             discretize_each=True, stop_on_halt=0.999)
        rows = K.max(axis=1) > 0
        pred = ad.val(final.D)
        hits = pred[rows].argmax(axis=1) == Y[rows].argmax(axis=1)
        total_hits += int(hits.sum())
        total_cells += int(rows.sum())
        pointer_ok += int((ad.val(final.d).argmax(axis=1) == y_ptr.argmax(axis=1)).sum())
    return {
        "accuracy": 100.0 * total_hits / total_cells,
        "pointer_accuracy": 100.0 * pointer_ok / len(examples),
        "count": len(examples),
        "length": length,
        "steps": budget,
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    store: ad.ParamStore
    history: list
    config: OptimizerConfig
    task: str
    variant: str
    train_length: int
    dims: mc.MachineDims
    budget: int
    seed_used: int
    best_dev: float
    sketch_hash: str
    aborted: bool = False


def sketch_hash(program):
    digest = hashlib.sha256(program.dump().encode())
    for spec in program.slots:
        digest.update(spec.text.encode())
    return digest.hexdigest()[:16]


def init_sketch_params(program, dims, seed):
    """Fresh parameters for every slot; `seed` is anything default_rng takes."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    for spec in program.slots:
        slots.init_params(spec, dims, rng, store)
    return store


def train(task, variant, train_length, config, train_set=None, dev_set=None,
          optimize=True, target_acc=100.0, settle_epochs=0, dev_every=1,
          dev_length=None, log=None, max_len=None):
    """Train one sketch; returns the best-dev parameters and history.

    Deterministic under config.seed. Loss turning non-finite aborts the
    run and returns the last best checkpoint. `dev_length` lets model
    selection probe generalization beyond the training length (dev
    instances are always freshly generated, never test instances).
    """
    program = programs.load(task.variants[variant])
    dims = task_dims(task, train_length, max_len=max_len)
    program.check_continuous(dims)
    plan = ex.build_plan(program, collapse=optimize, interp=optimize)
    budget = step_budget(task, train_length, optimize=optimize)
    dev_length = dev_length or train_length

    seq = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq, noise_seq, train_seq, dev_seq = seq.spawn(5)
    if train_set is None:
        counts = {"sort": (256, 32), "add": (512, 256)}[task.name]
        gen = gen_sort_dataset if task.name == "sort" else gen_add_dataset
        arg = train_length if task.name == "sort" else train_length // 2
        train_set = gen(arg, counts[0], train_seq)
    if dev_set is None:
        counts = {"sort": 32, "add": 256}[task.name]
        gen = gen_sort_dataset if task.name == "sort" else gen_add_dataset
        arg = dev_length if task.name == "sort" else dev_length // 2
        dev_set = gen(arg, counts, dev_seq)

    store = init_sketch_params(program, dims, init_seq)
    adam = Adam(store, config.learning_rate)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    dev_budget = step_budget(task, dev_length, optimize=True)

    history = []
    best_dev, best_store = -1.0, store.copy()
    t0 = time.perf_counter()
    step_index = 0
    aborted = False
    settle_left = None

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            Y, K, y_ptr = target_arrays(batch, dims)
            try:
                with ad.Tape() as tape:
                    bound = store.bind(tape)
                    ctx = ex.make_context(plan, dims, params=bound, batch=len(batch))
                    state = encode_batch(batch, dims, plan)
                    final, _, _ = ex.run(state, plan, ctx, steps=budget)
                    batch_loss = loss(final, Y, K, y_ptr)
                    tape.backward(batch_loss)
                    grads = tape.grads()
            except (ForthError,) as err:  # divergence: keep the last good model
                aborted = True
                if log:
                    log({"epoch": epoch, "aborted": str(err)})
                break
            epoch_loss += float(ad.val(batch_loss))
            batches += 1
            optimize_step(adam, grads, config, step_index, noise_rng)
            step_index += 1
        if aborted:
            break
        dev_acc = None
        if epoch % dev_every == 0 or epoch == config.epochs - 1:
            dev_acc = evaluate(store, program, plan, task, dev_set, dev_length,
                               budget=dev_budget, max_len=max_len)["accuracy"]
            if dev_acc >= best_dev:  # prefer later, sharper models on ties
                best_dev, best_store = dev_acc, store.copy()
        row = {"epoch": epoch, "train_loss": epoch_loss / max(1, batches),
               "dev_accuracy": dev_acc, "seconds": time.perf_counter() - t0}
        history.append(row)
        if log:
            log(row)
        if dev_acc is not None and dev_acc >= target_acc:
            if settle_left is None:
                settle_left = settle_epochs
            elif settle_left <= 0:
                break
            else:
                settle_left -= 1
            if settle_left <= 0 and settle_epochs == 0:
                break

    return TrainResult(
        store=best_store, history=history, config=config, task=task.name,
        variant=variant, train_length=train_length, dims=dims, budget=budget,
        seed_used=config.seed, best_dev=best_dev,
        sketch_hash=sketch_hash(program), aborted=aborted,
    )


def train_with_restarts(task, variant, train_length, config, seeds, **kw):
    """Try seeds in order; first run reaching 100% dev accuracy wins."""
    best = None
    for seed in seeds:
        result = train(task, variant, train_length, replace(config, seed=seed), **kw)
        if best is None or result.best_dev > best.best_dev:
            best = result
        if result.best_dev >= 100.0 - 1e-9:
            return result
    return best


# ---------------------------------------------------------------------------
# artifact io


def write_metrics_csv(history, path):
    with open(path, "w") as fh:
        fh.write("epoch,trainLoss,devAccuracy,secondsElapsed\n")
        for row in history:
            dev = "" if row["dev_accuracy"] is None else "%.4f" % row["dev_accuracy"]
            fh.write("%d,%.6f,%s,%.3f\n"
                     % (row["epoch"], row["train_loss"], dev, row["seconds"]))


def write_dataset_jsonl(examples, path):
    with open(path, "w") as fh:
        for exm in examples:
            fh.write(json.dumps({"input": list(exm.inputs),
                                 "target": list(exm.target),
                                 "aux": exm.aux}) + "\n")


def read_dataset_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Example(inputs=tuple(obj["input"]),
                               target=tuple(obj["target"]),
                               aux=obj.get("aux", {})))
    return out


def save_checkpoint(result, stem):
    result.store.save(stem)
    manifest = {
        "task": result.task,
        "variant": result.variant,
        "train_length": result.train_length,
        "sketch_hash": result.sketch_hash,
        "seed": result.seed_used,
        "dims": {"l": result.dims.l, "v": result.dims.v},
        "budget": result.budget,
        "best_dev": result.best_dev,
        "config": {
            "learning_rate": result.config.learning_rate,
            "batch_size": result.config.batch_size,
            "clip_norm": result.config.clip_norm,
            "noise_eta": result.config.noise_eta,
            "noise_gamma": result.config.noise_gamma,
            "epochs": result.config.epochs,
            "seed": result.config.seed,
        },
    }
    with open(str(stem) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(stem):
    store = ad.ParamStore.load(stem)
    with open(str(stem) + ".manifest.json") as fh:
        manifest = json.load(fh)
    return store, manifest


def default_config(task_name):
    """Hyperparameters from the published experiments."""
    if task_name == "sort":
        return OptimizerConfig(learning_rate=1.0, batch_size=16)
    return OptimizerConfig(learning_rate=0.05, batch_size=16)
