"""Downstream models that score rendered images.

``SurrogateModel`` is a softmax-linear classifier over a 32x32 area-averaged
copy of the image (centered by subtracting 0.5), with exact pixel-space
gradients. ``BlackBoxModel``
forwards images to an external scorer process through files in a protocol
directory (see ``docs/blackbox_protocol.md``); it can score but never
supplies gradients.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from filelock import FileLock

from .errors import CapabilityError, ConfigError, CorruptFileError, ModelInvalidError, ProtocolError, UnavailableError
from .images import save_png

INPUT_SIZE = 32
FEATURE_OFFSET = 0.5  # logits = W (pixels - 0.5) + b
PROTOCOL_HEADER = "splatattack-blackbox 1"


@dataclass(frozen=True)
class LabelScores:
    labels: tuple[str, ...]
    scores: np.ndarray

    def __getitem__(self, label: str) -> float:
        return float(self.scores[self.labels.index(label)])

    @property
    def top1(self) -> tuple[str, float]:
        k = int(np.argmax(self.scores))
        return self.labels[k], float(self.scores[k])

    def as_dict(self) -> dict[str, float]:
        return {lb: float(s) for lb, s in zip(self.labels, self.scores)}


class VictimModel:
    """Common interface: ``labels`` plus capability flags."""

    differentiable = False
    black_box = False

    def __init__(self, labels: Sequence[str]):
        self.labels = list(labels)
        if len(self.labels) < 2:
            raise ModelInvalidError("a victim model needs at least two labels")

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ConfigError(f"unknown label {label!r}; model labels are {self.labels}") from None

    def score(self, image: np.ndarray) -> LabelScores:
        raise NotImplementedError

    def loss_and_pixel_gradient(self, image, label, mode="targeted"):
        raise CapabilityError(
            f"{type(self).__name__} has no gradients; use score() for black-box evaluation only"
        )


# --------------------------------------------------------------------------- area resampling


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` matrix averaging the input cells each output cell overlaps."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for k in range(n_out):
        lo, hi = edges[k], edges[k + 1]
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[k, i] = min(hi, i + 1) - max(lo, i)
    return m / m.sum(axis=1, keepdims=True)


def downsample(image: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    h, w, _ = image.shape
    my, mx = area_matrix(h, size), area_matrix(w, size)
    tmp = np.einsum("yi,ijc->yjc", my, image)
    return np.einsum("xj,yjc->yxc", mx, tmp)


def downsample_adjoint(grad_small: np.ndarray, height: int, width: int) -> np.ndarray:
    size = grad_small.shape[0]
    my, mx = area_matrix(height, size), area_matrix(width, size)
    tmp = np.einsum("xj,yxc->yjc", mx, grad_small)
    return np.einsum("yi,yjc->ijc", my, tmp)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


# --------------------------------------------------------------------------- surrogate


class SurrogateModel(VictimModel):
    differentiable = True

    def __init__(self, labels: Sequence[str], weights=None, bias=None):
        super().__init__(labels)
        k, d = len(self.labels), 3 * INPUT_SIZE * INPUT_SIZE
        self.weights = np.zeros((k, d)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(k, d)
        self.bias = np.zeros(k) if bias is None else np.asarray(bias, dtype=np.float64).reshape(k)
        self.train_accuracy: float | None = None
        self.holdout_accuracy: float | None = None

    def features(self, image: np.ndarray) -> np.ndarray:
        # Centered pixels: with all-positive inputs the bias would have to learn the class threshold alone.
        return downsample(np.asarray(image, dtype=np.float64)).ravel() - FEATURE_OFFSET

    def logits(self, image: np.ndarray) -> np.ndarray:
        return self.weights @ self.features(image) + self.bias

    def score(self, image: np.ndarray) -> LabelScores:
        return LabelScores(tuple(self.labels), _softmax(self.logits(image)))

    def loss_and_pixel_gradient(self, image, label, mode="targeted"):
        """Cross-entropy against ``label`` and its exact gradient w.r.t. every pixel channel.

        ``mode`` only documents intent; the attack decides whether to ascend
        (untargeted) or descend (targeted) this loss.
        """
        if mode not in ("targeted", "untargeted"):
            raise ConfigError(f"mode must be targeted or untargeted, got {mode!r}")
        image = np.asarray(image, dtype=np.float64)
        k = self.label_index(label) if isinstance(label, str) else int(label)
        z = self.logits(image)
        zmax = np.max(z)
        lse = zmax + np.log(np.sum(np.exp(z - zmax)))
        loss = float(lse - z[k])
        p = np.exp(z - lse)
        p[k] -= 1.0
        g_small = (self.weights.T @ p).reshape(INPUT_SIZE, INPUT_SIZE, 3)
        h, w, _ = image.shape
        return loss, downsample_adjoint(g_small, h, w)


def score(model: VictimModel, image) -> LabelScores:
    return model.score(image)


def loss_and_pixel_gradient(model: VictimModel, image, label, mode="targeted"):
    return model.loss_and_pixel_gradient(image, label, mode)


@dataclass
class SurrogateConfig:
    epochs: int = 200
    lr: float = 0.5
    seed: int = 0
    holdout_fraction: float = 0.25
    weight_decay: float = 1e-3
    batch_size: int = 32

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def train_surrogate(datasets: Mapping[str, Sequence[np.ndarray]], config: SurrogateConfig | None = None) -> SurrogateModel:
    """Fit softmax regression on labeled renders; label order follows ``datasets``.

    A seeded per-label split holds out ``holdout_fraction`` of each class
    (at least one image when a class has two or more). Minibatch SGD with
    L2 weight decay, zero-initialized weights.
    """
    cfg = config or SurrogateConfig()
    labels = list(datasets)
    if len(labels) < 2:
        raise ConfigError("train_surrogate needs at least two labels")
    rng = np.random.default_rng(cfg.seed)
    train_x, train_y, hold_x, hold_y = [], [], [], []
    model = SurrogateModel(labels)
    for k, label in enumerate(labels):
        images = list(datasets[label])
        if not images:
            raise ConfigError(f"label {label!r} has no images")
        feats = np.stack([model.features(im) for im in images])
        perm = rng.permutation(len(images))
        n_hold = int(round(cfg.holdout_fraction * len(images))) if len(images) > 1 else 0
        hold, train = perm[:n_hold], perm[n_hold:]
        train_x.append(feats[train]); train_y += [k] * len(train)
        hold_x.append(feats[hold]); hold_y += [k] * len(hold)
    x = np.concatenate(train_x)
    y = np.asarray(train_y)
    onehot = np.eye(len(labels))[y]
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            p = _softmax(x[batch] @ model.weights.T + model.bias)
            err = (p - onehot[batch]) / len(batch)
            model.weights -= cfg.lr * (err.T @ x[batch] + cfg.weight_decay * model.weights)
            model.bias -= cfg.lr * err.sum(axis=0)
    model.train_accuracy = _accuracy(model, x, y)
    xh = np.concatenate(hold_x) if hold_y else np.zeros((0, x.shape[1]))
    model.holdout_accuracy = _accuracy(model, xh, np.asarray(hold_y)) if hold_y else None
    return model


def _accuracy(model: SurrogateModel, x: np.ndarray, y: np.ndarray) -> float:
    pred = np.argmax(x @ model.weights.T + model.bias, axis=1)
    return float(np.mean(pred == y))


_WEIGHTS_MAGIC = b"SAVW"
_WEIGHTS_HEAD = struct.Struct("<4s5I")


def save_surrogate(model: SurrogateModel, path) -> None:
    """Little-endian: magic, version, label count, height, width, channels,
    then length-prefixed UTF-8 label names, then float32 weights and biases."""
    parts = [_WEIGHTS_HEAD.pack(_WEIGHTS_MAGIC, 1, len(model.labels), INPUT_SIZE, INPUT_SIZE, 3)]
    for label in model.labels:
        raw = label.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(model.weights, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(model.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_surrogate(path) -> SurrogateModel:
    raw = Path(path).read_bytes()
    if len(raw) < _WEIGHTS_HEAD.size:
        raise CorruptFileError(f"{path}: weights file too short")
    magic, version, k, h, w, c = _WEIGHTS_HEAD.unpack_from(raw)
    if magic != _WEIGHTS_MAGIC or version != 1:
        raise CorruptFileError(f"{path}: not a surrogate weights file")
    if (h, w, c) != (INPUT_SIZE, INPUT_SIZE, 3):
        raise CorruptFileError(f"{path}: unsupported input dims {(h, w, c)}")
    off = _WEIGHTS_HEAD.size
    labels = []
    for _ in range(k):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        labels.append(raw[off:off + n].decode("utf-8"))
        off += n
    d = h * w * c
    need = 4 * (k * d + k)
    if len(raw) - off != need:
        raise CorruptFileError(f"{path}: expected {need} weight bytes, found {len(raw) - off}")
    weights = np.frombuffer(raw, dtype="<f4", count=k * d, offset=off).reshape(k, d)
    bias = np.frombuffer(raw, dtype="<f4", count=k, offset=off + 4 * k * d)
    return SurrogateModel(labels, weights.astype(np.float64), bias.astype(np.float64))


# --------------------------------------------------------------------------- black-box protocol

_dir_locks: dict[str, threading.Lock] = {}
_dir_locks_guard = threading.Lock()


def _thread_lock(directory: Path) -> threading.Lock:
    key = str(directory.resolve())
    with _dir_locks_guard:
        return _dir_locks.setdefault(key, threading.Lock())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _next_request_id(directory: Path) -> int:
    ids = [int(p.name[4:]) for p in directory.glob("req-*") if p.name[4:].isdigit()]
    return max(ids, default=0) + 1


def parse_response(text: str, request_id: int) -> LabelScores:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if len(lines) < 3 or lines[0] != PROTOCOL_HEADER:
        raise ProtocolError("response must start with the protocol header and list >= 2 labels")
    key, _, value = lines[1].partition(" ")
    if key != "request_id" or value.strip() != str(request_id):
        raise ProtocolError(f"response request_id mismatch (wanted {request_id}, got {lines[1]!r})")
    labels, scores = [], []
    for line in lines[2:]:
        name, _, num = line.rpartition(" ")
        try:
            val = float(num)
        except ValueError:
            raise ProtocolError(f"malformed score line {line!r}") from None
        if not name or not np.isfinite(val) or not 0.0 <= val <= 1.0:
            raise ProtocolError(f"malformed score line {line!r}")
        labels.append(name)
        scores.append(val)
    if len(set(labels)) != len(labels):
        raise ProtocolError("duplicate label in response")
    total = float(np.sum(scores))
    if abs(total - 1.0) > 1e-6:
        raise ProtocolError(f"scores sum to {total}, not 1")
    return LabelScores(tuple(labels), np.asarray(scores))


def blackbox_score(protocol_dir, image: np.ndarray, timeout: float = 30.0, poll: float = 0.02) -> LabelScores:
    """Hand ``image`` to an external scorer watching ``protocol_dir`` and wait for its answer."""
    directory = Path(protocol_dir)
    directory.mkdir(parents=True, exist_ok=True)
    with _thread_lock(directory), FileLock(str(directory / ".lock")):
        rid = _next_request_id(directory)
        image_name = f"img-{rid}.png"
        save_png(image, directory / image_name)
        digest = hashlib.sha256((directory / image_name).read_bytes()).hexdigest()
        request = f"{PROTOCOL_HEADER}\nrequest_id {rid}\nimage {image_name}\nsha256 {digest}\n"
        _atomic_write(directory / f"req-{rid}", request.encode("utf-8"))
        resp = directory / f"resp-{rid}"
        deadline = time.monotonic() + timeout
        while not resp.exists():
            if time.monotonic() >= deadline:
                raise UnavailableError(f"no response for request {rid} in {protocol_dir} after {timeout}s")
            time.sleep(poll)
        return parse_response(resp.read_text(encoding="utf-8"), rid)


def parse_request(text: str) -> dict:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != PROTOCOL_HEADER:
        raise ProtocolError("request is missing the protocol header")
    fields = dict(ln.split(" ", 1) for ln in lines[1:])
    for key in ("request_id", "image", "sha256"):
        if key not in fields:
            raise ProtocolError(f"request missing {key!r}")
    fields["request_id"] = int(fields["request_id"])
    return fields


def format_response(request_id: int, scores: Mapping[str, float]) -> str:
    body = "".join(f"{name} {float(val)!r}\n" for name, val in scores.items())
    return f"{PROTOCOL_HEADER}\nrequest_id {request_id}\n{body}"


class BlackBoxModel(VictimModel):
    black_box = True

    def __init__(self, labels: Sequence[str], protocol_dir, timeout: float = 30.0):
        super().__init__(labels)
        self.protocol_dir = Path(protocol_dir)
        self.timeout = timeout

    def score(self, image: np.ndarray) -> LabelScores:
        got = blackbox_score(self.protocol_dir, image, self.timeout)
        scores = np.array([got.as_dict().get(lb, 0.0) for lb in self.labels])
        return LabelScores(tuple(self.labels), scores)


@dataclass
class EchoScorer:
    """Reference scorer for the protocol: answers every request with fixed scores.

    Runs in a background thread; checks each request's checksum before answering.
    """

    protocol_dir: Path
    scores: Mapping[str, float]
    poll: float = 0.01
    answered: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.protocol_dir = Path(self.protocol_dir)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=5)

    def _loop(self):
        while not self._stop.is_set():
            for req in sorted(self.protocol_dir.glob("req-*")):
                if req.name.endswith(".tmp") or not req.name[4:].isdigit():
                    continue
                rid = int(req.name[4:])
                resp = self.protocol_dir / f"resp-{rid}"
                if resp.exists():
                    continue
                fields = parse_request(req.read_text(encoding="utf-8"))
                digest = hashlib.sha256((self.protocol_dir / fields["image"]).read_bytes()).hexdigest()
                if digest != fields["sha256"]:
                    continue
                _atomic_write(resp, format_response(rid, self.scores).encode("utf-8"))
                self.answered.append(rid)
            time.sleep(self.poll)
