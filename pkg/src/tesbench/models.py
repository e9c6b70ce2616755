"""Classifier families, source training / fine-tuning, and the
encoder-decoder perturbation generator.

Two small conv families (ConvA, ConvB) play the role of distinct backbone
architectures. A classifier is a named parameter dict plus an
architecture id; the body (everything before the final affine head) is
independent of the label-space size, which is what makes whole-network
fine-tuning onto a different label space possible.

The generator maps an image to a latent code z (encoder) and a latent
code back to a bounded perturbation (decoder): the raw decoder output is
squashed with tanh, scaled by the budget eps, added to the clean image
and clipped, so every generated candidate sits inside the eps-ball of
its clean image by construction.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step, zero_grads
from .rng import philox

log = logging.getLogger(__name__)

IMG_SIZE = 16
DEFAULT_LATENT_DIM = 32


class TrainingDivergedError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


# layer tuples: ("conv", name, cin, cout, k, stride, pad) | ("affine", name, din, dout)
# | ("relu",) | ("flatten",)
_BODIES = {
    "ConvA": (
        ("conv", "conv1", 1, 8, 3, 1, 1),
        ("relu",),
        ("conv", "conv2", 8, 16, 3, 2, 1),
        ("relu",),
        ("flatten",),
        ("affine", "fc1", 16 * 8 * 8, 64),
        ("relu",),
    ),
    "ConvB": (
        ("conv", "conv1", 1, 6, 5, 1, 2),
        ("relu",),
        ("conv", "conv2", 6, 12, 3, 2, 1),
        ("relu",),
        ("conv", "conv3", 12, 24, 3, 2, 1),
        ("relu",),
        ("flatten",),
    ),
}
FEATURE_DIMS = {"ConvA": 64, "ConvB": 24 * 4 * 4}
ARCH_IDS = tuple(_BODIES)

_ENCODER = (
    ("conv", "enc1", 1, 8, 3, 2, 1),
    ("relu",),
    ("conv", "enc2", 8, 16, 3, 2, 1),
    ("relu",),
    ("flatten",),
)
_ENC_FLAT = 16 * 4 * 4


@dataclass
class Classifier:
    arch_id: str
    label_space_size: int
    params: dict
    provenance: Optional[bytes] = None  # digest of the fine-tuning source, None if scratch


@dataclass
class AdversarialGenerator:
    latent_dim: int
    eps: float
    delta: float
    mode: str  # untargeted | targeted
    params: dict
    target_class: Optional[int] = None  # source-domain class used for targeted training


# ---------------------------------------------------------------------------
# parameter init and forward passes


def _init_layer_params(layers, rng, params):
    for layer in layers:
        if layer[0] == "conv":
            _, name, cin, cout, k, _, _ = layer
            std = np.sqrt(2.0 / (cin * k * k))
            params[f"{name}.w"] = ad.Tensor(rng.normal(0.0, std, (cout, cin, k, k)))
            params[f"{name}.b"] = ad.Tensor(np.zeros(cout))
        elif layer[0] == "affine":
            _, name, din, dout = layer
            std = np.sqrt(2.0 / din)
            params[f"{name}.w"] = ad.Tensor(rng.normal(0.0, std, (din, dout)))
            params[f"{name}.b"] = ad.Tensor(np.zeros(dout))


def _run_layers(layers, params, h):
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            _, name, _, _, _, stride, pad = layer
            h = ad.conv2d(h, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=pad)
        elif kind == "affine":
            name = layer[1]
            h = ad.affine(h, params[f"{name}.w"], params[f"{name}.b"])
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "flatten":
            h = ad.reshape(h, (h.shape[0], -1))
    return h


def init_classifier(arch_id, label_space_size, seed) -> Classifier:
    if arch_id not in _BODIES:
        raise ValueError(f"unknown architecture {arch_id!r}, expected one of {ARCH_IDS}")
    rng = philox(seed, "clf-init", arch_id)
    params = {}
    _init_layer_params(_BODIES[arch_id], rng, params)
    _init_layer_params((("affine", "head", FEATURE_DIMS[arch_id], label_space_size),), rng, params)
    return Classifier(arch_id, label_space_size, params)


def body_param_names(arch_id):
    names = []
    for layer in _BODIES[arch_id]:
        if layer[0] in ("conv", "affine"):
            names += [f"{layer[1]}.w", f"{layer[1]}.b"]
    return names


def classifier_logits_t(clf: Classifier, x) -> ad.Tensor:
    """Pre-softmax output as a Tensor; records on the active tape if any."""
    h = _run_layers(_BODIES[clf.arch_id], clf.params, x)
    return ad.affine(h, clf.params["head.w"], clf.params["head.b"])


def _as_batch(image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None, None, :, :], True
    if arr.ndim == 3:
        return arr[None, :, :, :], True
    if arr.ndim == 4:
        return arr, False
    raise ValueError(f"expected image of 2-4 dims, got shape {arr.shape}")


def predict_logits(clf: Classifier, image):
    """White-box logit access (surrogate models and white-box baselines only)."""
    batch, single = _as_batch(image)
    logits = classifier_logits_t(clf, ad.Tensor(batch)).data
    return logits[0] if single else logits


def predict_scores(clf: Classifier, image):
    """Probability scores; the only classifier surface the query oracle exposes."""
    batch, single = _as_batch(image)
    scores = ad.softmax(classifier_logits_t(clf, ad.Tensor(batch))).data
    return scores[0] if single else scores


def accuracy(clf: Classifier, x, y):
    preds = predict_scores(clf, x).argmax(axis=1)
    return float((preds == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# training


def _trainable(params):
    class _Ctx:
        def __enter__(self):
            for p in params.values():
                p.requires_grad = True

        def __exit__(self, *exc):
            for p in params.values():
                p.requires_grad = False
                p.grad = None
            return False

    return _Ctx()


def _epoch_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train_classifier(dataset, arch_id, epochs, learning_rate=1e-3, seed=0, batch_size=64) -> Classifier:
    """Train from scratch on the dataset's train split; deterministic in seed."""
    clf = init_classifier(arch_id, dataset.class_count, seed)
    x_train, y_train = dataset.arrays("train")
    shuffle_rng = philox(seed, "clf-shuffle", arch_id)
    state = AdamState()
    with _trainable(clf.params):
        for epoch in range(epochs):
            for step, idx in enumerate(_epoch_batches(len(y_train), batch_size, shuffle_rng)):
                with ad.Tape() as tape:
                    logits = classifier_logits_t(clf, ad.Tensor(x_train[idx]))
                    loss = ad.cross_entropy(logits, y_train[idx])
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
                zero_grads(clf.params)
                tape.backward(loss)
                adam_step(clf.params, state, learning_rate)
    x_test, y_test = dataset.arrays("test")
    log.info(
        "trained %s (k=%d): train acc %.4f, test acc %.4f",
        arch_id,
        dataset.class_count,
        accuracy(clf, x_train, y_train),
        accuracy(clf, x_test, y_test),
    )
    return clf


def finetune(
    source: Classifier,
    target_dataset,
    epochs,
    head_lr=1e-3,
    body_lr=1e-4,
    seed=0,
    batch_size=64,
) -> Classifier:
    """Whole-network fine-tuning: body starts from the source, head is fresh.

    Every parameter is updated; the head uses a larger step than the body.
    """
    src_digest = model_digest(source)
    rng = philox(seed, "finetune-init", source.arch_id)
    params = {name: ad.Tensor(source.params[name].data.copy()) for name in body_param_names(source.arch_id)}
    head_params = {}
    _init_layer_params(
        (("affine", "head", FEATURE_DIMS[source.arch_id], target_dataset.class_count),), rng, head_params
    )
    params.update(head_params)
    clf = Classifier(source.arch_id, target_dataset.class_count, params, provenance=src_digest)

    body = {n: params[n] for n in body_param_names(source.arch_id)}
    head = {n: params[n] for n in ("head.w", "head.b")}
    x_train, y_train = target_dataset.arrays("train")
    shuffle_rng = philox(seed, "finetune-shuffle", source.arch_id)
    body_state, head_state = AdamState(), AdamState()
    with _trainable(clf.params):
        for epoch in range(epochs):
            for step, idx in enumerate(_epoch_batches(len(y_train), batch_size, shuffle_rng)):
                with ad.Tape() as tape:
                    logits = classifier_logits_t(clf, ad.Tensor(x_train[idx]))
                    loss = ad.cross_entropy(logits, y_train[idx])
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
                zero_grads(clf.params)
                tape.backward(loss)
                adam_step(body, body_state, body_lr)
                adam_step(head, head_state, head_lr)
    x_test, y_test = target_dataset.arrays("test")
    log.info(
        "fine-tuned %s -> k=%d: test acc %.4f",
        source.arch_id,
        target_dataset.class_count,
        accuracy(clf, x_test, y_test),
    )
    return clf


# ---------------------------------------------------------------------------
# adversarial generator


def init_generator(seed, latent_dim=DEFAULT_LATENT_DIM, eps=8 / 255, delta=0.0, mode="untargeted", target_class=None):
    rng = philox(seed, "gen-init")
    params = {}
    _init_layer_params(_ENCODER, rng, params)
    _init_layer_params((("affine", "enc_fc", _ENC_FLAT, latent_dim),), rng, params)
    _init_layer_params((("affine", "dec_fc", latent_dim, _ENC_FLAT),), rng, params)
    _init_layer_params(
        (("conv", "dec1", 16, 8, 3, 1, 1), ("conv", "dec2", 8, 1, 3, 1, 1)), rng, params
    )
    return AdversarialGenerator(latent_dim, float(eps), float(delta), mode, params, target_class)


def encode_t(gen: AdversarialGenerator, x) -> ad.Tensor:
    h = _run_layers(_ENCODER, gen.params, x)
    return ad.affine(h, gen.params["enc_fc.w"], gen.params["enc_fc.b"])


def _decode_raw_t(gen: AdversarialGenerator, z: ad.Tensor) -> ad.Tensor:
    if z.shape[-1] != gen.latent_dim:
        raise ValueError(f"latent dimension mismatch: expected {gen.latent_dim}, got {z.shape[-1]}")
    h = ad.relu(ad.affine(z, gen.params["dec_fc.w"], gen.params["dec_fc.b"]))
    h = ad.reshape(h, (h.shape[0], 16, 4, 4))
    h = ad.relu(ad.conv2d(ad.upsample2x(h), gen.params["dec1.w"], gen.params["dec1.b"], padding=1))
    return ad.conv2d(ad.upsample2x(h), gen.params["dec2.w"], gen.params["dec2.b"], padding=1)


def decode_perturb_t(gen: AdversarialGenerator, x_batch: np.ndarray, z: ad.Tensor) -> ad.Tensor:
    """x + eps*tanh(D(z)), exactly inside the eps-ball and [0,1]."""
    pert = ad.scale(ad.tanh_op(_decode_raw_t(gen, z)), gen.eps)
    return ad.ball_clip(x_batch, pert, gen.eps)


def encode(gen: AdversarialGenerator, image):
    """Latent code of an image: [d], or [B,d] for a batch."""
    batch, single = _as_batch(image)
    z = encode_t(gen, ad.Tensor(batch)).data
    return z[0] if single else z


def decode_perturb(gen: AdversarialGenerator, image, z):
    """Adversarial candidate for (image, latent z); shape follows the input."""
    batch, single = _as_batch(image)
    z = np.asarray(z, dtype=np.float64)
    zb = z[None, :] if z.ndim == 1 else z
    if zb.shape[0] != batch.shape[0]:
        if single and batch.shape[0] == 1:
            batch = np.broadcast_to(batch, (zb.shape[0],) + batch.shape[1:])
        else:
            raise ValueError(f"batch sizes differ: {batch.shape[0]} images vs {zb.shape[0]} latents")
    out = decode_perturb_t(gen, batch, ad.Tensor(zb)).data
    if single and z.ndim == 1:
        return out[0, 0]
    return out


def generator_fool_rate(gen, clf: Classifier, x, y):
    """White-box fool rate of the generator over correctly classified samples."""
    preds = predict_scores(clf, x).argmax(axis=1)
    correct = preds == y
    if not correct.any():
        return 0.0
    xa = x[correct]
    adv = decode_perturb(gen, xa, encode(gen, xa))
    adv_preds = predict_scores(clf, adv).argmax(axis=1)
    if gen.mode == "targeted":
        return float((adv_preds == gen.target_class).mean())
    return float((adv_preds != y[correct]).mean())


def train_generator(
    f_a: Classifier,
    source_dataset,
    mode="untargeted",
    eps=8 / 255,
    delta=0.0,
    epochs=10,
    seed=0,
    target_class=None,
    learning_rate=1e-3,
    batch_size=64,
    latent_dim=DEFAULT_LATENT_DIM,
) -> AdversarialGenerator:
    """Stage-I training: minimize the margin loss of the frozen source model
    on generated candidates."""
    if f_a.label_space_size != source_dataset.class_count:
        raise ValueError("source model and dataset label spaces differ")
    if mode == "targeted" and target_class is None:
        raise ValueError("targeted generator training needs a source-domain target class")
    gen = init_generator(seed, latent_dim, eps, delta, mode, target_class)
    x_train, y_train = source_dataset.arrays("train")
    shuffle_rng = philox(seed, "gen-shuffle")
    state = AdamState()
    with _trainable(gen.params):
        for epoch in range(epochs):
            for step, idx in enumerate(_epoch_batches(len(y_train), batch_size, shuffle_rng)):
                xb = x_train[idx]
                with ad.Tape() as tape:
                    z = encode_t(gen, ad.Tensor(xb))
                    xhat = decode_perturb_t(gen, xb, z)
                    logits = classifier_logits_t(f_a, xhat)
                    if mode == "targeted":
                        per_sample = ad.cw_loss_targeted(logits, np.full(len(idx), target_class), delta)
                    else:
                        per_sample = ad.cw_loss_untargeted(logits, y_train[idx], delta)
                    loss = ad.mean_all(per_sample)
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
                zero_grads(gen.params)
                tape.backward(loss)
                adam_step(gen.params, state, learning_rate)
    x_test, y_test = source_dataset.arrays("test")
    log.info(
        "trained generator (mode=%s, eps=%.4f): white-box fool rate %.4f",
        mode,
        eps,
        generator_fool_rate(gen, f_a, x_test, y_test),
    )
    return gen


# ---------------------------------------------------------------------------
# TESW container: magic, u32 version, arch id (u16 len + bytes), u32 k,
# 32-byte provenance digest (zeros if scratch), u32 block count, then per
# block: name (u16 len + bytes), u8 rank, rank * u32 dims, f64 values.
# Everything little-endian; blocks sorted by name.

_W_MAGIC = b"TESW"
_W_VERSION = 1
_GEN_ARCH_ID = "TESGen"
_ZERO_DIGEST = bytes(32)


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def serialize_model(obj) -> bytes:
    if isinstance(obj, Classifier):
        arch_id, k, digest = obj.arch_id, obj.label_space_size, obj.provenance or _ZERO_DIGEST
        blocks = {name: p.data for name, p in obj.params.items()}
    elif isinstance(obj, AdversarialGenerator):
        arch_id, k, digest = _GEN_ARCH_ID, obj.latent_dim, _ZERO_DIGEST
        blocks = {name: p.data for name, p in obj.params.items()}
        blocks["meta.eps"] = np.float64(obj.eps)
        blocks["meta.delta"] = np.float64(obj.delta)
        blocks["meta.targeted"] = np.float64(1.0 if obj.mode == "targeted" else 0.0)
        blocks["meta.target_class"] = np.float64(-1 if obj.target_class is None else obj.target_class)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    out = bytearray()
    out += _W_MAGIC
    out += struct.pack("<I", _W_VERSION)
    out += _pack_str(arch_id)
    out += struct.pack("<I", k)
    out += digest
    out += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], dtype=np.float64)
        out += _pack_str(name)
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def model_digest(obj) -> bytes:
    return hashlib.sha256(serialize_model(obj)).digest()


def save_model(obj, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(obj))


def _unpack_str(blob, offset):
    if offset + 2 > len(blob):
        raise ModelFormatError(f"truncated string length at byte {offset}")
    (n,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    if offset + n > len(blob):
        raise ModelFormatError(f"truncated string at byte {offset}")
    return blob[offset : offset + n].decode("utf-8"), offset + n


def load_model(path, expect_arch=None, expect_digest=None):
    """Load a classifier or generator; optional expectations for fine-tune wiring."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _W_MAGIC:
        raise ModelFormatError(f"bad magic {blob[:4]!r} at byte 0, expected {_W_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _W_VERSION:
        raise ModelFormatError(f"unsupported version {version} at byte 4")
    arch_id, offset = _unpack_str(blob, 8)
    (k,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    digest = blob[offset : offset + 32]
    if len(digest) != 32:
        raise ModelFormatError(f"truncated digest at byte {offset}")
    offset += 32
    (block_count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    blocks = {}
    for _ in range(block_count):
        name, offset = _unpack_str(blob, offset)
        if offset + 1 > len(blob):
            raise ModelFormatError(f"truncated rank at byte {offset}")
        rank = blob[offset]
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if offset + 8 * count > len(blob):
            raise ModelFormatError(f"truncated block {name!r} at byte {offset}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
        blocks[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise ModelFormatError(f"{len(blob) - offset} trailing bytes after byte {offset}")

    if expect_arch is not None and arch_id != expect_arch:
        raise ModelFormatError(f"architecture mismatch: file has {arch_id!r}, expected {expect_arch!r}")
    if expect_digest is not None and digest != expect_digest:
        raise ModelFormatError("provenance digest mismatch")

    if arch_id == _GEN_ARCH_ID:
        meta = {name: blocks.pop(name) for name in list(blocks) if name.startswith("meta.")}
        target = int(meta["meta.target_class"])
        return AdversarialGenerator(
            latent_dim=k,
            eps=float(meta["meta.eps"]),
            delta=float(meta["meta.delta"]),
            mode="targeted" if meta["meta.targeted"] else "untargeted",
            params={name: ad.Tensor(arr) for name, arr in blocks.items()},
            target_class=None if target < 0 else target,
        )
    if arch_id not in _BODIES:
        raise ModelFormatError(f"unknown architecture {arch_id!r}")
    provenance = None if digest == _ZERO_DIGEST else digest
    return Classifier(arch_id, k, {name: ad.Tensor(arr) for name, arr in blocks.items()}, provenance)
