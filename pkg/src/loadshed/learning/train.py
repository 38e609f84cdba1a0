"""Per-bus model training, prediction and the model file format."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from ..network import FlexibilityCost
from ..ols import recover_shedding
from .dataset import BusDataset
from .features import FeatureLayout
from .mlp import MLP, cross_entropy_loss, mse_loss, softmax

logger = logging.getLogger(__name__)

MODEL_MAGIC = "LOADSHED-BUSMODEL"
MODEL_VERSION = 1
MIN_SAMPLES = 50


class TrainingError(RuntimeError):
    pass


class LayoutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    """Training hyperparameters.

    ``optimizer`` is ``"lbfgs"`` (full-batch quasi-Newton, the default) or
    ``"adam"`` (mini-batch).  ``epochs`` bounds the L-BFGS iterations or the
    Adam passes over the training set.  Early stopping watches the loss on a
    ``val_fraction`` slice of the training split and keeps the best weights.
    """

    hidden: tuple[int, ...] = (40, 30, 20)
    activation: str = "relu"
    optimizer: str = "lbfgs"
    epochs: int = 2000
    batch: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    patience: int = 100
    val_fraction: float = 0.1
    train_fraction: float = 0.7
    split_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.train_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1) and val_fraction in [0, 1)")

    def describe(self) -> str:
        return ";".join(f"{k}={v}" for k, v in asdict(self).items())


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # features whose training std was zero (std stored as 1)

    @classmethod
    def fit(cls, X: np.ndarray, tol: float = 1e-12) -> "Normalizer":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        constant = std <= tol * np.maximum(np.abs(mean), 1.0)
        std = np.where(constant, 1.0, std)
        return cls(mean, std, constant)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


@dataclass
class BusModel:
    layout: FeatureLayout
    net: MLP
    normalizer: Normalizer
    kind: str = "regressor"  # or "classifier"
    output_mean: float = 0.0
    output_std: float = 1.0
    classes: tuple[str, ...] = ()
    cost: FlexibilityCost | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def bus(self) -> int:
        return self.layout.bus


def split_indices(n: int, hyper: Hyper) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(train, validation, test) row indices; validation is carved from the training share."""
    perm = np.random.default_rng(hyper.split_seed).permutation(n)
    n_train = int(round(hyper.train_fraction * n))
    n_val = int(round(hyper.val_fraction * n_train))
    return perm[:n_train - n_val], perm[n_train - n_val:n_train], perm[n_train:]


def _fit(net: MLP, loss, Xtr, ytr, Xva, yva, hyper: Hyper) -> dict:
    """Optimise ``net`` in place; returns training metadata."""
    best = {"loss": math.inf, "theta": net.flat(), "epoch": 0}
    history = {"epochs": 0}

    def track(theta, epoch) -> bool:
        if len(Xva) == 0:
            best.update(theta=theta.copy(), epoch=epoch)
            return False
        net.set_flat(theta)
        v, _ = loss(net, Xva, yva)
        if not np.isfinite(v):
            raise TrainingError(f"validation loss is {v} at epoch {epoch}; {hyper.describe()}")
        if v < best["loss"]:
            best.update(loss=v, theta=theta.copy(), epoch=epoch)
        return epoch - best["epoch"] >= hyper.patience

    if hyper.optimizer == "lbfgs":
        def fun(theta):
            net.set_flat(theta)
            f, g = loss(net, Xtr, ytr, hyper.weight_decay)
            if not np.isfinite(f):
                raise TrainingError(f"training loss is {f}; {hyper.describe()}")
            return f, g

        def callback(intermediate_result):
            history["epochs"] += 1
            if track(intermediate_result.x, history["epochs"]):
                raise StopIteration

        minimize(fun, net.flat(), jac=True, method="L-BFGS-B", callback=callback,
                 options={"maxiter": hyper.epochs, "maxfun": 4 * hyper.epochs,
                          "ftol": 1e-15, "gtol": 1e-12})
    else:
        rng = np.random.default_rng(hyper.init_seed + 1)
        theta = net.flat()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        b1, b2, eps = 0.9, 0.999, 1e-8
        step = 0
        for epoch in range(1, hyper.epochs + 1):
            order = rng.permutation(len(Xtr))
            for s in range(0, len(order), hyper.batch):
                rows = order[s:s + hyper.batch]
                net.set_flat(theta)
                f, g = loss(net, Xtr[rows], ytr[rows], hyper.weight_decay)
                if not np.isfinite(f):
                    raise TrainingError(f"training loss is {f} at epoch {epoch}; "
                                        f"{hyper.describe()}")
                step += 1
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                theta = theta - hyper.learning_rate * (m / (1 - b1 ** step)) / (
                    np.sqrt(v / (1 - b2 ** step)) + eps)
            history["epochs"] = epoch
            if track(theta, epoch):
                break
    net.set_flat(best["theta"])
    final, _ = loss(net, Xtr, ytr)
    return {"epochs": str(history["epochs"]), "best_epoch": str(best["epoch"]),
            "train_loss": repr(float(final)), "val_loss": repr(float(best["loss"]))}


@dataclass
class RegressionMetrics:
    bus: int
    n_train: int
    n_test: int
    test_mse: float  # ($/MWh)^2
    test_mae: float  # $/MWh
    mean_abs_alpha: float  # $/MWh, over the test rows
    mape: float  # 100 * sum|err| / sum|alpha|
    p_shed_mae: float  # MW, NaN without a cost curve
    p_shed_max: float


def train_bus_model(
    samples: BusDataset,
    hyper: Hyper = Hyper(),
    cost: FlexibilityCost | None = None,
) -> tuple[BusModel, RegressionMetrics]:
    """Fit one bus's alpha regressor on a 70/30 split and score the held-out rows.

    Features and labels are standardised with training-split statistics.
    If ``cost`` is given, the held-out shedding error of the recovered
    decision is reported as well.
    """
    ds = samples
    if len(ds) < MIN_SAMPLES:
        raise TrainingError(f"bus {ds.bus}: {len(ds)} samples, at least {MIN_SAMPLES} needed")
    if not np.all(np.isfinite(ds.y)):
        raise TrainingError(f"bus {ds.bus}: non-finite labels")
    tr, va, te = split_indices(len(ds), hyper)
    norm = Normalizer.fit(ds.X[np.r_[tr, va]])
    fit_rows = np.r_[tr, va]
    y_mean = float(ds.y[fit_rows].mean())
    y_std = float(ds.y[fit_rows].std())
    if y_std <= 1e-12 * max(abs(y_mean), 1.0):
        y_std = 1.0
    sizes = (len(ds.layout),) + tuple(hyper.hidden) + (1,)
    net = MLP.init(sizes, hyper.activation, np.random.default_rng(hyper.init_seed))
    Z = norm(ds.X)
    t = (ds.y - y_mean) / y_std
    meta = _fit(net, mse_loss, Z[tr], t[tr], Z[va], t[va], hyper)
    meta.update(hyper=hyper.describe(), constant_features=str(int(norm.constant.sum())))
    model = BusModel(ds.layout, net, norm, "regressor", y_mean, y_std, cost=cost, meta=meta)
    return model, score(model, ds, te)


def score(model: BusModel, ds: BusDataset, rows) -> RegressionMetrics:
    rows = np.asarray(rows, dtype=int)
    y = ds.y[rows]
    pred = predict(model, ds.X[rows])
    err = np.abs(pred - y)
    denom = np.sum(np.abs(y))
    p_mae = p_max = float("nan")
    if model.cost is not None and np.all(np.isfinite(ds.p_shed[rows])):
        p_hat = np.array([recover_shedding(a, model.cost) for a in pred])
        p_err = np.abs(p_hat - ds.p_shed[rows])
        p_mae, p_max = float(p_err.mean()), float(p_err.max())
    return RegressionMetrics(
        bus=ds.bus, n_train=len(ds) - len(rows), n_test=len(rows),
        test_mse=float(np.mean(err ** 2)), test_mae=float(err.mean()),
        mean_abs_alpha=float(np.mean(np.abs(y))),
        mape=float(100.0 * err.sum() / denom) if denom > 0 else float("nan"),
        p_shed_mae=p_mae, p_shed_max=p_max,
    )


def train_classifier(
    X: np.ndarray,
    classes: Sequence[str],
    layout: FeatureLayout,
    hyper: Hyper = Hyper(),
) -> tuple[BusModel, float]:
    """Softmax classifier over contingency ids; returns the model and held-out accuracy."""
    X = np.asarray(X, dtype=float)
    if len(X) < MIN_SAMPLES:
        raise TrainingError(f"{len(X)} samples, at least {MIN_SAMPLES} needed")
    names = tuple(sorted(set(classes), key=list(classes).index))
    labels = np.array([names.index(c) for c in classes])
    tr, va, te = split_indices(len(X), hyper)
    norm = Normalizer.fit(X[np.r_[tr, va]])
    Z = norm(X)
    sizes = (X.shape[1],) + tuple(hyper.hidden) + (len(names),)
    net = MLP.init(sizes, hyper.activation, np.random.default_rng(hyper.init_seed))
    if len(names) > 1:
        meta = _fit(net, cross_entropy_loss, Z[tr], labels[tr], Z[va], labels[va], hyper)
    else:
        meta = {"epochs": "0"}
    meta.update(hyper=hyper.describe())
    model = BusModel(layout, net, norm, "classifier", classes=names, meta=meta)
    acc = float(np.mean(classify(model, X[te]) == np.array(classes)[te])) if len(te) else 1.0
    return model, acc


def _check_input(model: BusModel, x, layout: FeatureLayout | None) -> np.ndarray:
    if layout is not None and layout != model.layout:
        raise LayoutMismatchError(
            f"features laid out as {layout.describe()}, model expects {model.layout.describe()}")
    X = np.asarray(x, dtype=float)
    if X.shape[-1] != model.net.sizes[0]:
        raise LayoutMismatchError(
            f"feature vector has {X.shape[-1]} entries, model expects {model.net.sizes[0]}")
    return X


def predict(model: BusModel, x, layout: FeatureLayout | None = None):
    """Predicted alpha ($/MWh) for one feature vector (scalar) or a batch (array)."""
    if model.kind != "regressor":
        raise ValueError("predict needs a regression model")
    X = _check_input(model, x, layout)
    out = model.net.forward(model.normalizer(np.atleast_2d(X)))[:, 0]
    out = out * model.output_std + model.output_mean
    return float(out[0]) if X.ndim == 1 else out


def predict_shedding(model: BusModel, x, layout: FeatureLayout | None = None):
    """``(alpha_hat, p_hat)`` with ``p_hat`` from the closed-form recovery (MW)."""
    if model.cost is None:
        raise ValueError(f"model for bus {model.bus} carries no cost curve")
    a = predict(model, x, layout)
    if np.ndim(a) == 0:
        return a, recover_shedding(a, model.cost)
    return a, np.array([recover_shedding(v, model.cost) for v in a])


def classify(model: BusModel, x, layout: FeatureLayout | None = None) -> np.ndarray:
    if model.kind != "classifier":
        raise ValueError("classify needs a classifier model")
    X = np.atleast_2d(_check_input(model, x, layout))
    p = softmax(model.net.forward(model.normalizer(X)))
    return np.array(model.classes)[np.argmax(p, axis=1)]


# -- model files -----------------------------------------------------------

def _floats(v) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(v))


def format_model(model: BusModel) -> str:
    lines = [MODEL_MAGIC, f"version {MODEL_VERSION}", f"layout {model.layout.describe()}",
             f"kind {model.kind}", f"activation {model.net.activation}",
             "sizes " + " ".join(str(s) for s in model.net.sizes)]
    if model.classes:
        lines.append("classes " + ",".join(model.classes))
    lines += [f"input_mean {_floats(model.normalizer.mean)}",
              f"input_std {_floats(model.normalizer.std)}",
              "constant " + " ".join(str(int(c)) for c in model.normalizer.constant),
              f"output {repr(float(model.output_mean))} {repr(float(model.output_std))}"]
    if model.cost is not None:
        c = model.cost
        lines.append("cost " + " ".join(
            [str(c.bus)] + [repr(float(getattr(c, f.name))) for f in fields(c)[1:]]))
    for k, v in sorted(model.meta.items()):
        lines.append(f"meta {k} {v}")
    for k, (W, b) in enumerate(zip(model.net.weights, model.net.biases)):
        lines.append(f"W{k} {W.shape[0]} {W.shape[1]}")
        lines += [_floats(row) for row in W]
        lines.append(f"b{k} {b.shape[0]}")
        lines.append(_floats(b))
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> BusModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        raise ValueError("not a bus model file (bad magic line)")
    pos = 1
    head: dict[str, str] = {}
    meta: dict[str, str] = {}
    while pos < len(lines) and not lines[pos].startswith("W0 "):
        key, _, rest = lines[pos].partition(" ")
        if key == "meta":
            mk, _, mv = rest.partition(" ")
            meta[mk] = mv
        else:
            head[key] = rest
        pos += 1
    if int(head.get("version", -1)) != MODEL_VERSION:
        raise ValueError(f"unsupported model version {head.get('version')}")
    sizes = tuple(int(s) for s in head["sizes"].split())
    Ws, bs = [], []
    for k in range(len(sizes) - 1):
        tag, r, c = lines[pos].split()
        if tag != f"W{k}":
            raise ValueError(f"expected W{k}, found {tag}")
        r, c = int(r), int(c)
        Ws.append(np.array([[float(v) for v in lines[pos + 1 + i].split()] for i in range(r)])
                  .reshape(r, c))
        pos += 1 + r
        tag, n = lines[pos].split()
        bs.append(np.array([float(v) for v in lines[pos + 1].split()]).reshape(int(n)))
        pos += 2
    if lines[pos].strip() != "end":
        raise ValueError("model file is truncated")
    vec = lambda key: np.array([float(v) for v in head[key].split()])  # noqa: E731
    norm = Normalizer(vec("input_mean"), vec("input_std"),
                      np.array([v == "1" for v in head["constant"].split()]))
    cost = None
    if "cost" in head:
        vals = head["cost"].split()
        cost = FlexibilityCost(int(vals[0]), *[float(v) for v in vals[1:]])
    out_mean, out_std = (float(v) for v in head["output"].split())
    return BusModel(
        layout=FeatureLayout.parse(head["layout"]),
        net=MLP(sizes, head["activation"], Ws, bs),
        normalizer=norm, kind=head["kind"], output_mean=out_mean, output_std=out_std,
        classes=tuple(head["classes"].split(",")) if "classes" in head else (),
        cost=cost, meta=meta,
    )


def save_model(model: BusModel, path: str | Path) -> None:
    Path(path).write_text(format_model(model), encoding="utf-8")


def load_model(path: str | Path) -> BusModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))
