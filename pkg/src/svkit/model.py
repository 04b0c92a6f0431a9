"""The x-vector network, its training objectives, and checkpoints.

The network is five dilated 1-D convolution layers over frames
(conv -> relu -> batchnorm), statistics pooling (mean and std over
time), and two embedding layers (affine -> relu -> batchnorm) feeding a
linear speaker classifier. The speaker embedding is the pre-activation
affine output of the first embedding layer in eval mode.

Two optional objectives reshape the embedding space:

* a Gaussian-center regularizer that treats the (bias-free) classifier
  weight columns as per-speaker means and pulls classifier inputs
  toward the column of their label;
* auxiliary regression branches that tap each embedding layer at one of
  four points (in/fc/af/bn) and fit per-utterance Gaussian noise
  targets, either from the raw tap ("f0") or through a learned linear
  projection ("f1").

Checkpoints are a little-endian binary container ("XVCK"): magic,
format version, a JSON header describing the specs and array layout,
the float64 array blobs, then a sha256 checksum of everything before
it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    AdamState,
    BatchNormState,
    Tensor,
    add,
    affine,
    batchnorm1d,
    dilated_conv1d,
    gather_cols,
    l2_sum,
    mse_sq,
    relu,
    reshape,
    scale,
    stats_pool,
)
from .errors import FormatError, ShapeError

CHECKPOINT_MAGIC = b"XVCK"
CHECKPOINT_VERSION = 1

TAPS = ("in", "fc", "af", "bn")
EMBED_LAYERS = ("embed1", "embed2")

DEFAULT_FRAME_LAYERS = (
    (512, 5, 1),
    (512, 3, 2),
    (512, 3, 3),
    (512, 1, 1),
    (1536, 1, 1),
)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters.

    frame_layers is five (out_dim, kernel, dilation) triples; embed_dims
    the widths of the two embedding layers. classifier_bias is dropped
    when the classifier weights double as Gaussian speaker centers.
    """

    num_speakers: int
    feature_dim: int = 30
    frame_layers: tuple = DEFAULT_FRAME_LAYERS
    embed_dims: tuple = (512, 512)
    classifier_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "frame_layers",
                           tuple(tuple(int(v) for v in layer)
                                 for layer in self.frame_layers))
        object.__setattr__(self, "embed_dims",
                           tuple(int(v) for v in self.embed_dims))
        if self.num_speakers < 2:
            raise ValueError(f"need at least 2 speakers, got {self.num_speakers}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if len(self.frame_layers) != 5:
            raise ValueError(f"expected 5 frame layers, got "
                             f"{len(self.frame_layers)}")
        for dout, k, dil in self.frame_layers:
            if dout < 1 or k < 1 or dil < 1:
                raise ValueError(f"bad frame layer ({dout}, {k}, {dil})")
        if len(self.embed_dims) != 2 or min(self.embed_dims) < 1:
            raise ValueError(f"embed_dims must be two positive ints, got "
                             f"{self.embed_dims}")

    @property
    def receptive_field(self):
        return 1 + sum((k - 1) * d for _, k, d in self.frame_layers)

    @property
    def pooled_dim(self):
        return 2 * self.frame_layers[-1][0]

    def to_dict(self):
        return {
            "num_speakers": self.num_speakers,
            "feature_dim": self.feature_dim,
            "frame_layers": [list(layer) for layer in self.frame_layers],
            "embed_dims": list(self.embed_dims),
            "classifier_bias": self.classifier_bias,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(num_speakers=d["num_speakers"],
                   feature_dim=d["feature_dim"],
                   frame_layers=tuple(tuple(x) for x in d["frame_layers"]),
                   embed_dims=tuple(d["embed_dims"]),
                   classifier_bias=d["classifier_bias"])


@dataclass(frozen=True)
class AuxBranchSpec:
    """Configuration of the noise-target regression branches.

    mode "f0" regresses the raw tapped vector onto targets of the same
    width; "f1" first applies a learned projection to projection_dim.
    noise_mode "fixed" keeps one target per (utterance, layer) for the
    whole run; "resampled" draws fresh targets every batch.
    """

    mode: str
    tap: str = "fc"
    projection_dim: int = 100
    noise_mode: str = "fixed"

    def __post_init__(self):
        if self.mode not in ("f0", "f1"):
            raise ValueError(f"mode must be 'f0' or 'f1', got {self.mode!r}")
        if self.tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}, got {self.tap!r}")
        if self.projection_dim < 1:
            raise ValueError(f"projection_dim must be >= 1, got "
                             f"{self.projection_dim}")
        if self.noise_mode not in ("fixed", "resampled"):
            raise ValueError(f"noise_mode must be 'fixed' or 'resampled', "
                             f"got {self.noise_mode!r}")

    def to_dict(self):
        return {"mode": self.mode, "tap": self.tap,
                "projection_dim": self.projection_dim,
                "noise_mode": self.noise_mode}

    @classmethod
    def from_dict(cls, d):
        return cls(mode=d["mode"], tap=d["tap"],
                   projection_dim=d["projection_dim"],
                   noise_mode=d["noise_mode"])


def tap_dim(spec, layer, tap):
    """Width of the tapped vector at (layer, tap)."""
    if layer not in EMBED_LAYERS:
        raise ValueError(f"unknown embedding layer {layer!r}")
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}")
    e1, e2 = spec.embed_dims
    if layer == "embed1":
        return spec.pooled_dim if tap == "in" else e1
    return e1 if tap == "in" else e2


def aux_target_dims(spec, aux):
    """Regression target width per embedding layer for an aux config."""
    if aux.mode == "f1":
        return {layer: aux.projection_dim for layer in EMBED_LAYERS}
    return {layer: tap_dim(spec, layer, aux.tap) for layer in EMBED_LAYERS}


class Model:
    """Parameters plus batchnorm running state for one network."""

    def __init__(self, spec, aux, params, bn_states):
        self.spec = spec
        self.aux = aux
        self.params = params
        self.bn_states = bn_states

    @property
    def num_params(self):
        return sum(p.values.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grads(self):
        """Current gradient per parameter (None where untouched)."""
        return {name: p.grad for name, p in self.params.items()}

    def state_arrays(self):
        """All persistent arrays: parameters then running moments."""
        out = OrderedDict((name, p.values) for name, p in self.params.items())
        for name, st in self.bn_states.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out


def build_model(spec, aux=None, seed=0):
    """Initialize a model; weights are fan-in scaled uniform, biases zero.

    The auxiliary projection parameters are drawn after every main
    parameter, so models that differ only in aux configuration share
    bit-identical main weights for a given seed.
    """
    rng = np.random.default_rng([int(seed), 29])

    def uniform_fan_in(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))

    params = OrderedDict()
    bn_states = {}

    def add_bn(name, dim):
        st = BatchNormState(dim)
        bn_states[name] = st
        params[f"{name}.gamma"] = st.gamma
        params[f"{name}.beta"] = st.beta

    din = spec.feature_dim
    for i, (dout, k, _dil) in enumerate(spec.frame_layers, start=1):
        params[f"frame{i}.kernel"] = uniform_fan_in((k, din, dout), k * din)
        params[f"frame{i}.bias"] = Tensor(np.zeros(dout))
        add_bn(f"frame{i}.bn", dout)
        din = dout

    e1, e2 = spec.embed_dims
    params["embed1.weight"] = uniform_fan_in((spec.pooled_dim, e1),
                                             spec.pooled_dim)
    params["embed1.bias"] = Tensor(np.zeros(e1))
    add_bn("embed1.bn", e1)
    params["embed2.weight"] = uniform_fan_in((e1, e2), e1)
    params["embed2.bias"] = Tensor(np.zeros(e2))
    add_bn("embed2.bn", e2)

    params["classifier.weight"] = uniform_fan_in((e2, spec.num_speakers), e2)
    if spec.classifier_bias:
        params["classifier.bias"] = Tensor(np.zeros(spec.num_speakers))

    if aux is not None and aux.mode == "f1":
        for layer in EMBED_LAYERS:
            dim_in = tap_dim(spec, layer, aux.tap)
            params[f"aux.{layer}.weight"] = uniform_fan_in(
                (dim_in, aux.projection_dim), dim_in)
            params[f"aux.{layer}.bias"] = Tensor(np.zeros(aux.projection_dim))

    return Model(spec, aux, params, bn_states)


@dataclass
class ForwardRecord:
    """Graph outputs of one forward pass.

    taps maps embedding layer -> {"in", "fc", "af", "bn"} -> Tensor.
    xvector is the fc tap of embed1; classifier_input the bn tap of
    embed2 (the vector the classifier, and the Gaussian-center
    regularizer, actually see).
    """

    logits: Tensor
    taps: dict
    xvector: Tensor
    classifier_input: Tensor


def _batch_to_array(batch, feature_dim):
    if isinstance(batch, np.ndarray):
        arr = np.asarray(batch, dtype=np.float64)
    else:
        seqs = list(batch)
        if not seqs:
            raise ShapeError("empty batch")
        lengths = {s.num_frames for s in seqs}
        if len(lengths) != 1:
            raise ShapeError(f"batch mixes frame counts {sorted(lengths)}")
        arr = np.stack([s.frames for s in seqs]).astype(np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"batch must be (N, T, D), got {arr.shape}")
    if arr.shape[2] != feature_dim:
        raise ShapeError(f"feature dim {arr.shape[2]} != model dim "
                         f"{feature_dim}")
    return arr


def forward(model, batch, mode):
    """Run the network; returns logits and every embedding-layer tap."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = model.spec
    arr = _batch_to_array(batch, spec.feature_dim)
    n = arr.shape[0]
    if arr.shape[1] < spec.receptive_field:
        raise ShapeError(f"need >= {spec.receptive_field} frames, got "
                         f"{arr.shape[1]}")
    p = model.params
    h = Tensor(arr)
    for i, (dout, _k, dil) in enumerate(spec.frame_layers, start=1):
        h = dilated_conv1d(h, p[f"frame{i}.kernel"], p[f"frame{i}.bias"], dil)
        h = relu(h)
        t_cur = h.shape[1]
        flat = reshape(h, (n * t_cur, dout))
        flat = batchnorm1d(flat, model.bn_states[f"frame{i}.bn"], mode)
        h = reshape(flat, (n, t_cur, dout))

    pooled = stats_pool(h)
    taps = {}
    cur = pooled
    for layer in EMBED_LAYERS:
        fc = affine(cur, p[f"{layer}.weight"], p[f"{layer}.bias"])
        af = relu(fc)
        bn = batchnorm1d(af, model.bn_states[f"{layer}.bn"], mode)
        taps[layer] = {"in": cur, "fc": fc, "af": af, "bn": bn}
        cur = bn

    logits = affine(cur, p["classifier.weight"],
                    p.get("classifier.bias"))
    return ForwardRecord(logits=logits, taps=taps,
                         xvector=taps["embed1"]["fc"],
                         classifier_input=cur)


def extract_embedding(model, utterance):
    """Eval-mode speaker embedding (embed1 fc tap) as a float64 vector."""
    frames = utterance.frames if hasattr(utterance, "frames") else utterance
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"utterance frames must be (T, D), got {arr.shape}")
    record = forward(model, arr[None], "eval")
    return record.xvector.values[0].copy()


def gtm_posterior(weights, vec):
    """Speaker posterior from bias-free inner products, softmax normalized.

    weights: (E, S) with one column per speaker; vec: (E,) or (N, E).
    Pure numpy; used at analysis time, not in the training graph.
    """
    w = weights.values if isinstance(weights, Tensor) else np.asarray(weights)
    v = np.asarray(vec, dtype=np.float64)
    squeeze = v.ndim == 1
    v2 = v[None] if squeeze else v
    if v2.shape[1] != w.shape[0]:
        raise ShapeError(f"vector dim {v2.shape[1]} != weight rows {w.shape[0]}")
    z = v2 @ w
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    post = ez / ez.sum(axis=1, keepdims=True)
    return post[0] if squeeze else post


def gtm_regularizer(weights, inputs, labels, squared=True):
    """Pull classifier inputs toward their label's weight column.

    Returns the summed squared distance between each row of inputs and
    the column of weights selected by its label (unsquared row norms
    when squared=False).
    """
    centers = gather_cols(weights, labels)
    if squared:
        return mse_sq(inputs, centers)
    return l2_sum(inputs, centers)


def aux_predictions(model, record):
    """Per-layer regression outputs of the auxiliary branches."""
    if model.aux is None:
        raise ValueError("model has no auxiliary branch configuration")
    aux = model.aux
    out = {}
    for layer in EMBED_LAYERS:
        v = record.taps[layer][aux.tap]
        if aux.mode == "f1":
            v = affine(v, model.params[f"aux.{layer}.weight"],
                       model.params[f"aux.{layer}.bias"])
        out[layer] = v
    return out


def aux_mse_loss(predictions, targets, batch_size, squared=True):
    """Mean-over-batch regression loss summed across layers and dims.

    predictions and targets are mappings layer -> (N, dim); the total is
    (1/N) sum over layers of the per-row distances (squared Euclidean,
    or unsquared when squared=False).
    """
    if set(predictions) != set(targets):
        raise ValueError(f"prediction layers {sorted(predictions)} != "
                         f"target layers {sorted(targets)}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    total = None
    for layer in sorted(predictions):
        tgt = targets[layer]
        tgt = tgt if isinstance(tgt, Tensor) else Tensor(tgt)
        term = mse_sq(predictions[layer], tgt) if squared \
            else l2_sum(predictions[layer], tgt)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / batch_size)


def total_loss(ce, aux, weight, variant):
    """Weighted sum of the classification loss and an auxiliary term."""
    if variant not in ("baseline", "gtm", "gncn"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "baseline":
        if aux is not None:
            raise ValueError("baseline takes no auxiliary loss")
        return ce
    if aux is None:
        raise ValueError(f"variant {variant!r} needs an auxiliary loss")
    weight = float(weight)
    if weight < 0.0:
        raise ValueError(f"auxiliary weight must be >= 0, got {weight}")
    return add(ce, scale(aux, weight))


def _json_header(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model, optimizer=None, progress=None):
    """Serialize model (and optionally optimizer/progress) to one file."""
    arrays = model.state_arrays()
    header = {
        "format": "xvck",
        "model": model.spec.to_dict(),
        "aux": model.aux.to_dict() if model.aux is not None else None,
        "arrays": [{"name": k, "shape": list(v.shape)}
                   for k, v in arrays.items()],
        "progress": progress,
    }
    blobs = list(arrays.values())
    if optimizer is not None:
        header["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "weight_decay": optimizer.weight_decay,
            "t": optimizer.t,
            "arrays": list(model.params.keys()),
        }
        for name in model.params:
            blobs.append(optimizer.m[name])
        for name in model.params:
            blobs.append(optimizer.v[name])
    else:
        header["optimizer"] = None

    payload = _json_header(header)
    digest = hashlib.sha256()
    with open(path, "wb") as f:
        def emit(chunk):
            digest.update(chunk)
            f.write(chunk)

        emit(CHECKPOINT_MAGIC)
        emit(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        emit(payload)
        for blob in blobs:
            emit(np.ascontiguousarray(blob, dtype="<f8").tobytes())
        f.write(digest.digest())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, optimizer or None, progress)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    stored = data[-32:]
    body = data[:-32]
    if hashlib.sha256(body).digest() != stored:
        raise FormatError(f"{path}: checksum mismatch, file is corrupt")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header") from exc

    spec = ModelSpec.from_dict(header["model"])
    aux = AuxBranchSpec.from_dict(header["aux"]) if header["aux"] else None
    model = build_model(spec, aux, seed=0)

    pos = 12 + hlen
    arrays = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = pos + 8 * count
        if end > len(body):
            raise FormatError(f"{path}: truncated array {meta['name']!r}")
        arrays[meta["name"]] = np.frombuffer(
            body[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end

    expected = set(model.state_arrays().keys())
    if set(arrays) != expected:
        raise FormatError(f"{path}: array names do not match the declared "
                          "architecture")
    for name, p in model.params.items():
        if arrays[name].shape != p.values.shape:
            raise FormatError(f"{path}: array {name!r} has shape "
                              f"{arrays[name].shape}, expected {p.values.shape}")
        p.values = arrays[name]
    for name, st in model.bn_states.items():
        st.running_mean = arrays[f"{name}.running_mean"]
        st.running_var = arrays[f"{name}.running_var"]

    optimizer = None
    opt_meta = header.get("optimizer")
    if opt_meta is not None:
        optimizer = AdamState(model.params,
                              learning_rate=opt_meta["learning_rate"],
                              beta1=opt_meta["beta1"],
                              beta2=opt_meta["beta2"],
                              epsilon=opt_meta["epsilon"],
                              weight_decay=opt_meta["weight_decay"])
        optimizer.t = int(opt_meta["t"])
        names = opt_meta["arrays"]
        for kind in ("m", "v"):
            store = getattr(optimizer, kind)
            for name in names:
                count = model.params[name].values.size
                end = pos + 8 * count
                if end > len(body):
                    raise FormatError(f"{path}: truncated optimizer state")
                store[name] = np.frombuffer(body[pos:end], dtype="<f8") \
                    .reshape(model.params[name].values.shape).copy()
                pos = end
    if pos != len(body):
        raise FormatError(f"{path}: {len(body) - pos} trailing bytes")
    return model, optimizer, header.get("progress")
