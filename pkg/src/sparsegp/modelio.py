"""Model file and dataset file input/output.

The model file is JSON with a fixed schema version.  Save -> load -> save is
byte-identical: documents are emitted with sorted keys and arrays as nested
lists, and loading validates every constituent invariant by rebuilding the
real objects.

Datasets are delimited text with a header row: input columns ``x0..x{D-1}``
followed by outputs ``y0..y{P-1}``, or a single ``output_index`` column plus
``y0`` for heterotopic data (one scalar observation of one output per row).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .conditionals import VariationalGaussian
from .errors import ConfigError, DataError
from .inducing import (
    InducingPatches,
    InducingPoints,
    Multiscale,
    SeparateIndependentInducingVariables,
    SharedIndependentInducingVariables,
)
from .kernels import (
    Convolutional,
    IntrinsicCoregionalization,
    Linear,
    LinearCoregionalization,
    Matern12,
    Matern32,
    Matern52,
    SeparateIndependent,
    SharedIndependent,
    SquaredExponential,
    White,
)
from .likelihoods import Bernoulli, CorrelatedGaussian, Gaussian, Poisson
from .models import (
    Constant,
    DGPModel,
    GPLayer,
    GPRModel,
    SVGPModel,
    UncertainSVGP,
    Zero,
)

SCHEMA_VERSION = 1

_KERNEL_TAGS = {
    "sqexp": SquaredExponential,
    "matern12": Matern12,
    "matern32": Matern32,
    "matern52": Matern52,
}


def _listed(a):
    return np.asarray(a, dtype=float).tolist()


# ---------------------------------------------------------------------------
# Kernel specs


def kernel_to_spec(kernel) -> dict:
    for tag, cls in _KERNEL_TAGS.items():
        if type(kernel) is cls:
            return {
                "tag": tag,
                "variance": float(kernel.variance),
                "lengthscales": _listed(kernel.lengthscales),
            }
    if type(kernel) is Linear:
        return {"tag": "linear", "variance": float(kernel.variance)}
    if type(kernel) is White:
        return {"tag": "white", "variance": float(kernel.variance)}
    if type(kernel) is SharedIndependent:
        return {
            "tag": "shared_independent",
            "base": kernel_to_spec(kernel.kernel),
            "outputs": kernel.output_dim,
        }
    if type(kernel) is SeparateIndependent:
        return {
            "tag": "separate_independent",
            "latents": [kernel_to_spec(k) for k in kernel.kernels],
        }
    if type(kernel) is IntrinsicCoregionalization:
        return {
            "tag": "imc",
            "base": kernel_to_spec(kernel.kernel),
            "w": _listed(kernel.w),
        }
    if type(kernel) is LinearCoregionalization:
        return {
            "tag": "lmc",
            "latents": [kernel_to_spec(k) for k in kernel.kernels],
            "w": _listed(kernel.w),
        }
    if type(kernel) is Convolutional:
        return {
            "tag": "conv",
            "base": kernel_to_spec(kernel.kernel),
            "image": list(kernel.image_shape),
            "patch": list(kernel.patch_shape),
        }
    raise ConfigError(f"kernel {type(kernel).__name__} has no file representation")


def spec_to_kernel(spec):
    if isinstance(spec, str):
        spec = {"tag": spec}
    if not isinstance(spec, dict) or "tag" not in spec:
        raise ConfigError(f"malformed kernel spec: {spec!r}")
    tag = spec["tag"]
    if tag in _KERNEL_TAGS:
        return _KERNEL_TAGS[tag](
            variance=spec.get("variance", 1.0),
            lengthscales=spec.get("lengthscales", 1.0),
        )
    if tag == "linear":
        return Linear(spec.get("variance", 1.0))
    if tag == "white":
        return White(spec.get("variance", 1.0))
    if tag == "shared_independent":
        return SharedIndependent(
            spec_to_kernel(spec["base"]), int(spec["outputs"])
        )
    if tag == "separate_independent":
        return SeparateIndependent([spec_to_kernel(s) for s in spec["latents"]])
    if tag == "lmc":
        return LinearCoregionalization(
            [spec_to_kernel(s) for s in spec["latents"]], np.asarray(spec["w"], float)
        )
    if tag == "imc":
        return IntrinsicCoregionalization(
            spec_to_kernel(spec["base"]), np.asarray(spec["w"], float)
        )
    if tag == "conv":
        return Convolutional(
            spec_to_kernel(spec["base"]), spec["image"], spec["patch"]
        )
    raise ConfigError(f"unknown kernel tag {tag!r}")


# ---------------------------------------------------------------------------
# Inducing specs


def inducing_to_spec(iv) -> dict:
    if type(iv) is Multiscale:
        return {"tag": "multiscale", "z": _listed(iv.z), "scales": _listed(iv.scales)}
    if type(iv) is InducingPatches:
        return {"tag": "patches", "z": _listed(iv.z)}
    if type(iv) is InducingPoints:
        return {"tag": "points", "z": _listed(iv.z)}
    if type(iv) is SharedIndependentInducingVariables:
        return {"tag": "shared", "base": inducing_to_spec(iv.base)}
    if type(iv) is SeparateIndependentInducingVariables:
        return {
            "tag": "separate",
            "members": [inducing_to_spec(m) for m in iv.members],
        }
    raise ConfigError(
        f"inducing variable {type(iv).__name__} has no file representation"
    )


def spec_to_inducing(spec):
    if not isinstance(spec, dict) or "tag" not in spec:
        raise ConfigError(f"malformed inducing spec: {spec!r}")
    tag = spec["tag"]
    if tag == "points":
        return InducingPoints(np.asarray(spec["z"], float))
    if tag == "multiscale":
        return Multiscale(
            np.asarray(spec["z"], float), np.asarray(spec["scales"], float)
        )
    if tag == "patches":
        return InducingPatches(np.asarray(spec["z"], float))
    if tag == "shared":
        return SharedIndependentInducingVariables(spec_to_inducing(spec["base"]))
    if tag == "separate":
        return SeparateIndependentInducingVariables(
            [spec_to_inducing(s) for s in spec["members"]]
        )
    raise ConfigError(f"unknown inducing tag {tag!r}")


# ---------------------------------------------------------------------------
# Likelihood and mean specs


def likelihood_to_spec(lik) -> dict:
    if type(lik) is Gaussian:
        return {"tag": "gaussian", "variance": float(lik.variance)}
    if type(lik) is CorrelatedGaussian:
        return {"tag": "correlated_gaussian", "cov": _listed(lik.cov)}
    if type(lik) is Bernoulli:
        return {"tag": "bernoulli"}
    if type(lik) is Poisson:
        return {"tag": "poisson"}
    raise ConfigError(f"likelihood {type(lik).__name__} has no file representation")


def spec_to_likelihood(spec):
    if isinstance(spec, str):
        spec = {"tag": spec}
    if not isinstance(spec, dict) or "tag" not in spec:
        raise ConfigError(f"malformed likelihood spec: {spec!r}")
    tag = spec["tag"]
    if tag == "gaussian":
        return Gaussian(spec.get("variance", 1.0))
    if tag == "correlated_gaussian":
        return CorrelatedGaussian(np.asarray(spec["cov"], float))
    if tag == "bernoulli":
        return Bernoulli()
    if tag == "poisson":
        return Poisson()
    raise ConfigError(f"unknown likelihood tag {tag!r}")


def mean_to_spec(mean) -> dict:
    if type(mean) is Zero:
        return {"tag": "zero"}
    if type(mean) is Constant:
        return {"tag": "constant", "value": float(mean.value)}
    raise ConfigError(f"mean function {type(mean).__name__} has no file representation")


def spec_to_mean(spec):
    if spec in (None, "zero"):
        return Zero()
    if isinstance(spec, dict):
        if spec.get("tag") == "zero":
            return Zero()
        if spec.get("tag") == "constant":
            return Constant(spec.get("value", 0.0))
    raise ConfigError(f"unknown mean function spec {spec!r}")


def _q_to_spec(q: VariationalGaussian) -> dict:
    if q.q_sqrt is None:
        raise ConfigError("model files need an explicit q_sqrt factor")
    sqrt = (
        {"blocks": [_listed(b) for b in q.q_sqrt]}
        if q.is_block
        else _listed(q.q_sqrt)
    )
    return {"q_mu": _listed(q.q_mu), "q_sqrt": sqrt, "whiten": q.whiten}


def _spec_to_q(spec) -> VariationalGaussian:
    sqrt = spec["q_sqrt"]
    if isinstance(sqrt, dict):
        sqrt = tuple(np.asarray(b, float) for b in sqrt["blocks"])
    else:
        sqrt = np.asarray(sqrt, float)
    return VariationalGaussian(
        np.asarray(spec["q_mu"], float), sqrt, whiten=bool(spec["whiten"])
    )


# ---------------------------------------------------------------------------
# Model files


def model_to_document(model, metadata: dict | None = None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "metadata": metadata or {}}
    if isinstance(model, GPRModel):
        doc.update(
            kind="gpr",
            kernel=kernel_to_spec(model.kernel),
            noise_variance=float(model.noise_variance),
            x=_listed(model.x),
            y=_listed(model.y),
        )
        return doc
    if isinstance(model, SVGPModel):
        doc.update(
            kind="svgp",
            kernel=kernel_to_spec(model.kernel),
            inducing=inducing_to_spec(model.inducing),
            likelihood=likelihood_to_spec(model.likelihood),
            mean_function=mean_to_spec(model.mean_function),
            num_data=model.num_data,
            jitter=model.jitter,
            **_q_to_spec(model.q),
        )
        return doc
    if isinstance(model, DGPModel):
        doc.update(
            kind="dgp",
            layers=[
                {
                    "kernel": kernel_to_spec(layer.kernel),
                    "inducing": inducing_to_spec(layer.inducing),
                    "mean_function": mean_to_spec(layer.mean_function),
                    **_q_to_spec(layer.q),
                }
                for layer in model.layers
            ],
            likelihood=likelihood_to_spec(model.likelihood),
            num_data=model.num_data,
            num_samples=model.num_samples,
            jitter=model.jitter,
        )
        return doc
    if isinstance(model, UncertainSVGP):
        doc.update(
            kind="svgp_uncertain",
            svgp=model_to_document(model.svgp),
            input_mean=_listed(model.input_mean),
            input_var=_listed(model.input_var),
            y=_listed(model.y),
        )
        return doc
    raise ConfigError(f"model {type(model).__name__} has no file representation")


def document_to_model(doc: dict):
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported model file schema: {doc.get('schema_version')!r}"
        )
    kind = doc.get("kind")
    if kind == "gpr":
        return GPRModel(
            spec_to_kernel(doc["kernel"]),
            float(doc["noise_variance"]),
            np.asarray(doc["x"], float),
            np.asarray(doc["y"], float),
        )
    if kind == "svgp":
        return SVGPModel(
            spec_to_kernel(doc["kernel"]),
            spec_to_likelihood(doc["likelihood"]),
            spec_to_inducing(doc["inducing"]),
            _spec_to_q(doc),
            spec_to_mean(doc.get("mean_function")),
            doc.get("num_data"),
            doc.get("jitter"),
        )
    if kind == "dgp":
        layers = [
            GPLayer(
                spec_to_kernel(layer["kernel"]),
                spec_to_inducing(layer["inducing"]),
                _spec_to_q(layer),
                spec_to_mean(layer.get("mean_function")),
            )
            for layer in doc["layers"]
        ]
        return DGPModel(
            layers,
            spec_to_likelihood(doc["likelihood"]),
            doc.get("num_data"),
            doc.get("num_samples", 1),
            doc.get("jitter"),
        )
    if kind == "svgp_uncertain":
        return UncertainSVGP(
            document_to_model(doc["svgp"]),
            np.asarray(doc["input_mean"], float),
            np.asarray(doc["input_var"], float),
            np.asarray(doc["y"], float),
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def save_model(model, path, metadata: dict | None = None) -> None:
    doc = model_to_document(model, metadata)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, sort_keys=True, indent=2)
        handle.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as err:
            raise ConfigError(f"model file is not valid JSON: {err}") from err
    model = document_to_model(doc)
    return model, doc.get("metadata", {})


# ---------------------------------------------------------------------------
# Dataset files


@dataclass
class Dataset:
    x: np.ndarray  # [N, D]
    y: np.ndarray | None  # [N, P] for homotopic files
    outputs: np.ndarray | None  # [N] observed output index, heterotopic files

    @property
    def heterotopic(self) -> bool:
        return self.outputs is not None

    @property
    def num_outputs(self) -> int:
        if self.heterotopic:
            return int(self.outputs.max()) + 1
        return 0 if self.y is None else self.y.shape[1]


def _parse_header(header):
    x_cols, y_cols = [], []
    output_col = None
    for i, name in enumerate(header):
        name = name.strip()
        if name.startswith("x") and name[1:].isdigit():
            x_cols.append((int(name[1:]), i))
        elif name.startswith("y") and name[1:].isdigit():
            y_cols.append((int(name[1:]), i))
        elif name == "output_index":
            output_col = i
        else:
            raise DataError(f"unrecognized column {name!r}")
    x_cols.sort()
    y_cols.sort()
    if [k for k, _ in x_cols] != list(range(len(x_cols))) or not x_cols:
        raise DataError("input columns must be x0..x{D-1}")
    if [k for k, _ in y_cols] != list(range(len(y_cols))):
        raise DataError("output columns must be y0..y{P-1}")
    if output_col is not None and len(y_cols) > 1:
        raise DataError("heterotopic files carry a single y0 column")
    return [i for _, i in x_cols], [i for _, i in y_cols], output_col


def read_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError("dataset file is empty")
    x_idx, y_idx, output_col = _parse_header(rows[0])
    width = len(rows[0])
    x, y, outputs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise DataError(f"line {lineno}: expected {width} cells, got {len(row)}")
        try:
            x.append([float(row[i]) for i in x_idx])
            if y_idx:
                y.append([float(row[i]) for i in y_idx])
            if output_col is not None:
                index = float(row[output_col])
                if index != int(index) or index < 0:
                    raise ValueError
                outputs.append(int(index))
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric cell") from None
    return Dataset(
        np.asarray(x, float),
        np.asarray(y, float) if y_idx else None,
        np.asarray(outputs, int) if output_col is not None else None,
    )


def write_dataset(path, x, y=None, outputs=None) -> None:
    x = np.asarray(x, float)
    header = [f"x{d}" for d in range(x.shape[1])]
    columns = [x]
    if outputs is not None:
        header.append("output_index")
        columns.append(np.asarray(outputs)[:, None])
    if y is not None:
        y = np.asarray(y, float)
        if y.ndim == 1:
            y = y[:, None]
        header.extend(f"y{p}" for p in range(y.shape[1]))
        columns.append(y)
    table = np.hstack(columns)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for lineno in range(table.shape[0]):
            writer.writerow([repr(float(v)) for v in table[lineno]])
