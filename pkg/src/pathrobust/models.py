"""Classifier interfaces, the built-in small CNN, weight files, and the
line-JSON subprocess protocol for probing external models output-only.

White-box access means ``forward`` over traced tensors plus enumerable
parameters; black-box access is ``predict(images) -> logits`` with no
gradient surface. The wire protocol transports raw float32 bytes in
base64 so logits round-trip bit-exactly.
"""

from __future__ import annotations

import base64
import json
import os
import select
import shlex
import struct
import subprocess
import sys
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import fnv1a64, substream

WEIGHTS_MAGIC = b"REET"
WEIGHTS_VERSION = 1


class WeightsFormatError(ValueError):
    """Bad magic, version, or structurally invalid weight file."""


class WeightsTruncatedError(WeightsFormatError):
    """Weight file ends before the declared content."""


class WeightsDigestError(WeightsFormatError):
    """Payload bytes do not match the stored integrity digest."""


class BlackboxError(RuntimeError):
    """Base class for subprocess classifier failures."""


class BlackboxProcessError(BlackboxError):
    """The external process exited or closed its pipes."""


class BlackboxProtocolError(BlackboxError):
    """The external process sent a malformed response."""


class BlackboxIdMismatchError(BlackboxProtocolError):
    """Response id does not match the request id."""


class BlackboxTimeoutError(BlackboxError):
    """No complete response within the deadline."""


class ModelWeights:
    """Named float32 arrays in a fixed order plus an integrity digest."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in arrays.items()}

    def payload(self) -> bytes:
        return b"".join(a.tobytes() for a in self.arrays.values())

    def digest(self) -> int:
        return fnv1a64(self.payload())

    def hexdigest(self) -> str:
        return f"{self.digest():016x}"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return list(self.arrays) == list(other.arrays) and all(
            a.shape == other.arrays[k].shape and np.array_equal(a, other.arrays[k], equal_nan=True)
            for k, a in self.arrays.items()
        )


def save_weights(weights: ModelWeights, path) -> None:
    payload = weights.payload()
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(weights.arrays))]
    for name, arr in weights.arrays.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(payload)
    parts.append(struct.pack("<Q", fnv1a64(payload)))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise WeightsTruncatedError(f"weight file truncated while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    version, n_entries = struct.unpack("<II", take(8, "header"))
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weight format version {version}")
    table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        table.append((name, shape))
    payload_len = sum(4 * int(np.prod(s, dtype=np.int64)) for _, s in table)
    payload = take(payload_len, "payload")
    (stored,) = struct.unpack("<Q", take(8, "digest"))
    if fnv1a64(payload) != stored:
        raise WeightsDigestError("weight payload does not match stored digest")
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return ModelWeights(arrays)


class SmallCNN:
    """Built-in classifier for 3x32x32 inputs in [0,1], ~25k parameters.

    conv(3->8, 3x3, pad 1) -> relu -> maxpool 2 -> conv(8->16, 3x3, pad 1)
    -> relu -> maxpool 2 -> flatten -> affine(16*8*8 -> C). Convolutions
    use reflect padding.
    """

    PARAM_NAMES = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias")

    def __init__(self, weights: ModelWeights):
        missing = [n for n in self.PARAM_NAMES if n not in weights.arrays]
        if missing:
            raise WeightsFormatError(f"weights missing parameters {missing}")
        self._params = {n: Tensor(weights.arrays[n].copy(), requires_grad=True) for n in self.PARAM_NAMES}
        self.classes = int(self._params["fc.bias"].shape[0])

    @classmethod
    def init(cls, classes: int, seed: int) -> "SmallCNN":
        """Fresh He-uniform weights from the seeded init substream."""
        if classes < 2:
            raise ValueError("classifier needs at least 2 classes")
        rng = substream(seed, "init")

        def he_uniform(shape, fan_in):
            limit = np.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, size=shape).astype(np.float32)

        arrays = {
            "conv1.weight": he_uniform((8, 3, 3, 3), 3 * 9),
            "conv1.bias": np.zeros(8, dtype=np.float32),
            "conv2.weight": he_uniform((16, 8, 3, 3), 8 * 9),
            "conv2.bias": np.zeros(16, dtype=np.float32),
            "fc.weight": he_uniform((16 * 8 * 8, classes), 16 * 8 * 8),
            "fc.bias": np.zeros(classes, dtype=np.float32),
        }
        return cls(ModelWeights(arrays))

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def weights(self) -> ModelWeights:
        return ModelWeights({n: p.data.copy() for n, p in self._params.items()})

    def forward(self, x) -> Tensor:
        """Traced logits for a (N,3,32,32) batch."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        p = self._params
        h = ad.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1, pad_mode="reflect")
        h = ad.maxpool2d(ad.relu(h), 2)
        h = ad.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1, pad_mode="reflect")
        h = ad.maxpool2d(ad.relu(h), 2)
        h = ad.reshape(h, (x.shape[0], -1))
        return ad.add(ad.matmul(h, p["fc.weight"]), p["fc.bias"])

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Plain logits, no recording."""
        consts = {n: Tensor(p.data) for n, p in self._params.items()}
        x = Tensor(np.asarray(images, dtype=np.float32))
        h = ad.conv2d(x, consts["conv1.weight"], consts["conv1.bias"], padding=1, pad_mode="reflect")
        h = ad.maxpool2d(ad.relu(h), 2)
        h = ad.conv2d(h, consts["conv2.weight"], consts["conv2.bias"], padding=1, pad_mode="reflect")
        h = ad.maxpool2d(ad.relu(h), 2)
        h = ad.reshape(h, (x.shape[0], -1))
        return ad.add(ad.matmul(h, consts["fc.weight"]), consts["fc.bias"]).data


def loss_and_grads(model, images, labels, wrt: str = "weights", transform_params=None):
    """Mean cross-entropy and gradients for the requested leaves.

    ``wrt`` is one of weights / transform_params / both. For transform
    parameters the images must already be traced through the transform
    graph and ``transform_params`` maps names to the traced leaves.
    """
    if wrt not in ("weights", "transform_params", "both"):
        raise ValueError(f"unknown wrt {wrt!r}")
    want_theta = wrt in ("transform_params", "both")
    if want_theta:
        if not transform_params:
            raise ValueError("wrt includes transform_params but none were supplied")
        traced = isinstance(images, Tensor) and images._traced()
        if not traced:
            raise ValueError("wrt includes transform_params but images are not traced through a transform")
    logits = model.forward(images)
    loss = ad.cross_entropy(logits, labels)
    ad.backward(loss)
    grads: dict[str, np.ndarray] = {}
    if wrt in ("weights", "both"):
        for name, p in model.named_parameters().items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    if want_theta:
        for name, p in transform_params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return float(loss.data), grads


class InProcessBlackbox:
    """Output-only view of a white-box model."""

    def __init__(self, model):
        self._model = model

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self._model.predict(images)


class SubprocessClassifier:
    """Black-box classifier behind a child process speaking the wire protocol.

    One JSON object per line on stdin/stdout:
    request  {"id": int, "shape": [n,3,h,w], "data": base64 of raw
              little-endian float32 in CHW order}
    response {"id": int, "logits": [[float, ...], ...]}
    """

    def __init__(self, command, timeout: float = 30.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
        )
        self._timeout = timeout
        self._buf = b""
        self._next_id = 0

    def predict(self, images: np.ndarray) -> np.ndarray:
        images = np.ascontiguousarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ValueError(f"predict expects (N,C,H,W) images, got shape {images.shape}")
        req_id = self._next_id
        self._next_id += 1
        request = {
            "id": req_id,
            "shape": list(images.shape),
            "data": base64.b64encode(images.astype("<f4").tobytes()).decode("ascii"),
        }
        line = (json.dumps(request) + "\n").encode("utf-8")
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BlackboxProcessError(f"external classifier closed its input: {e}") from e
        raw = self._read_line()
        try:
            resp = json.loads(raw)
        except json.JSONDecodeError as e:
            raise BlackboxProtocolError(f"malformed response line: {raw[:200]!r}") from e
        if not isinstance(resp, dict) or "id" not in resp or "logits" not in resp:
            raise BlackboxProtocolError(f"response missing id/logits fields: {raw[:200]!r}")
        if resp["id"] != req_id:
            raise BlackboxIdMismatchError(f"expected response id {req_id}, got {resp['id']}")
        logits = np.asarray(resp["logits"], dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] != images.shape[0]:
            raise BlackboxProtocolError(f"logits shape {logits.shape} does not match batch {images.shape[0]}")
        return logits.astype(np.float32)

    def _read_line(self) -> bytes:
        fd = self._proc.stdout.fileno()
        end = time.monotonic() + self._timeout
        while b"\n" not in self._buf:
            remaining = end - time.monotonic()
            if remaining <= 0:
                raise BlackboxTimeoutError(f"no response within {self._timeout} s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                raise BlackboxTimeoutError(f"no response within {self._timeout} s")
            chunk = os.read(fd, 65536)
            if not chunk:
                code = self._proc.poll()
                raise BlackboxProcessError(f"external classifier exited (returncode={code})")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        for stream in (self._proc.stdin, self._proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def subprocess_blackbox(command, timeout: float = 30.0) -> SubprocessClassifier:
    return SubprocessClassifier(command, timeout=timeout)


def serve_stdio(model, stdin=None, stdout=None) -> None:
    """Answer wire-protocol requests until EOF (the loopback server loop)."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    for raw in stdin:
        raw = raw.strip()
        if not raw:
            continue
        req = json.loads(raw)
        shape = tuple(int(d) for d in req["shape"])
        data = base64.b64decode(req["data"])
        images = np.frombuffer(data, dtype="<f4").reshape(shape)
        logits = model.predict(images)
        resp = {"id": req["id"], "logits": [[float(v) for v in row] for row in logits]}
        stdout.write((json.dumps(resp) + "\n").encode("utf-8"))
        stdout.flush()
