"""Latent image streaming: a small autoencoder codec and a framed TCP protocol.

Wire format (little-endian)::

    frame   := "PGLS" version:u8 kind:u8 length:u32 payload[length]
    request := prompt_len:u16 prompt:utf8 png_bytes
    latent  := c:u16 h:u16 w:u16 values:f32[c*h*w]
    error   := code:u16 message:utf8
"""

from __future__ import annotations

import enum
import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import PercepgenError, PromptParseError
from .imaging import Image, decode_png, encode_png, psnr
from .model import ModelBundle, image_to_tensor, tensor_to_image

log = logging.getLogger(__name__)

MAGIC = b"PGLS"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
MAX_PAYLOAD = 1 << 30


class FrameKind(enum.IntEnum):
    REQUEST = 1
    LATENT = 2
    ERROR = 3


class ErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    BAD_VERSION = 2
    TRUNCATED = 3
    BAD_KIND = 4
    BAD_REQUEST = 5
    PROMPT = 6
    INTERNAL = 7
    TRAILING = 8


class FrameError(PercepgenError):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"{code.name}: {message}")
        self.code = code


class RemoteError(PercepgenError):
    """The server answered with an error frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.remote_message = message


@dataclass(frozen=True)
class Frame:
    kind: int
    payload: bytes = b""
    version: int = VERSION


def serialize_frame(frame: Frame) -> bytes:
    return HEADER.pack(MAGIC, frame.version, int(frame.kind), len(frame.payload)) + frame.payload


def parse_header(header: bytes):
    if len(header) < HEADER_SIZE:
        raise FrameError(ErrorCode.TRUNCATED, f"header has {len(header)} of {HEADER_SIZE} bytes")
    magic, version, kind, length = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise FrameError(ErrorCode.BAD_MAGIC, f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(ErrorCode.BAD_VERSION, f"unsupported version {version}")
    if kind not in FrameKind._value2member_map_:
        raise FrameError(ErrorCode.BAD_KIND, f"unknown frame kind {kind}")
    if length > MAX_PAYLOAD:
        raise FrameError(ErrorCode.BAD_REQUEST, f"payload of {length} bytes is too large")
    return version, kind, length


def deserialize_frame(data: bytes) -> Frame:
    version, kind, length = parse_header(data)
    available = len(data) - HEADER_SIZE
    if available < length:
        raise FrameError(ErrorCode.TRUNCATED, f"declared {length} payload bytes, got {available}")
    if available > length:
        raise FrameError(ErrorCode.TRAILING, f"{available - length} trailing bytes after payload")
    return Frame(kind, bytes(data[HEADER_SIZE:]), version)


def request_payload(prompt: str, png: bytes) -> bytes:
    raw = prompt.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FrameError(ErrorCode.BAD_REQUEST, "prompt longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw + png


def parse_request(payload: bytes):
    if len(payload) < 2:
        raise FrameError(ErrorCode.BAD_REQUEST, "request shorter than its prompt length field")
    (n,) = struct.unpack_from("<H", payload)
    if len(payload) < 2 + n:
        raise FrameError(ErrorCode.TRUNCATED, "prompt runs past the end of the request")
    return payload[2:2 + n].decode("utf-8"), payload[2 + n:]


def latent_payload(latent: np.ndarray) -> bytes:
    c, h, w = latent.shape
    return struct.pack("<HHH", c, h, w) + np.ascontiguousarray(latent, dtype="<f4").tobytes()


def parse_latent(payload: bytes) -> np.ndarray:
    if len(payload) < 6:
        raise FrameError(ErrorCode.TRUNCATED, "latent shorter than its shape header")
    c, h, w = struct.unpack_from("<HHH", payload)
    expected = 6 + 4 * c * h * w
    if len(payload) != expected:
        raise FrameError(ErrorCode.TRUNCATED, f"latent payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4", offset=6).reshape(c, h, w).astype(np.float32)


def error_payload(code: int, message: str) -> bytes:
    return struct.pack("<H", int(code)) + message.encode("utf-8")


def parse_error(payload: bytes):
    (code,) = struct.unpack_from("<H", payload)
    return code, payload[2:].decode("utf-8", errors="replace")


# --- codec ------------------------------------------------------------------------------


@dataclass
class CodecConfig:
    latent_channels: int = 16
    downscale: int = 8
    width: int = 64

    @property
    def stages(self) -> int:
        n = self.downscale.bit_length() - 1
        if 2**n != self.downscale or n < 1:
            raise ValueError("downscale must be a power of two >= 2")
        return n

    def latent_shape(self, height, width):
        return (self.latent_channels, height // self.downscale, width // self.downscale)

    def compression_ratio(self, height, width) -> float:
        c, h, w = self.latent_shape(height, width)
        return 3 * height * width / (c * h * w)


class LatentCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config = config or CodecConfig()
        n = config.stages
        widths = [min(config.width, 32 * 2**i) for i in range(n)]
        enc, cin = [], 3
        for w in widths:
            enc += [nn.Conv2d(cin, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            cin = w
        enc.append(nn.Conv2d(cin, config.latent_channels, 3, 1, 1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(config.latent_channels, widths[-1], 3, 1, 1), nn.LeakyReLU(0.2)]
        for i in range(n - 1, -1, -1):
            cout = widths[i - 1] if i > 0 else 3
            dec.append(nn.ConvTranspose2d(widths[i], cout, 4, 2, 1))
            if i > 0:
                dec.append(nn.LeakyReLU(0.2))
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return torch.tanh(self.decoder(self.encoder(x)))

    @torch.no_grad()
    def encode(self, img: Image) -> np.ndarray:
        self.eval()
        return self.encoder(image_to_tensor(img))[0].numpy().astype(np.float32)

    @torch.no_grad()
    def decode(self, latent: np.ndarray) -> Image:
        self.eval()
        z = torch.from_numpy(np.ascontiguousarray(latent, dtype=np.float32))[None]
        return tensor_to_image(torch.tanh(self.decoder(z)))


def codec_encode(codec: LatentCodec, img: Image) -> np.ndarray:
    return codec.encode(img)


def codec_decode(codec: LatentCodec, latent: np.ndarray) -> Image:
    return codec.decode(latent)


def train_codec(images, config: CodecConfig | None = None, epochs: int = 150, batch_size: int = 4,
                lr: float = 2e-3, seed: int = 0, log_every: int = 0) -> LatentCodec:
    """Fit the autoencoder with L1 + L2 reconstruction on signed-domain images."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    codec = LatentCodec(config)
    data = torch.cat([image_to_tensor(im) for im in images])
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, epochs))
    codec.train()
    for epoch in range(epochs):
        total = 0.0
        order = torch.from_numpy(rng.permutation(len(data)))
        for start in range(0, len(data), batch_size):
            batch = data[order[start:start + batch_size]]
            out = codec(batch)
            loss = (out - batch).abs().mean() + ((out - batch) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        sched.step()
        if log_every and (epoch + 1) % log_every == 0:
            log.info("codec epoch %d loss %.5f", epoch + 1, total / len(data))
    codec.eval()
    return codec


def codec_round_trip_psnr(codec: LatentCodec, images) -> float:
    vals = [psnr(codec.decode(codec.encode(im)).to("u8"), im.to("u8")) for im in images]
    return float(np.mean(vals))


CODEC_MAGIC = b"PGCD"


def save_codec(codec: LatentCodec, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sd = codec.state_dict()
    index, blobs, offset = [], [], 0
    for name, t in sd.items():
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    raw = json.dumps({"config": asdict(codec.config), "tensors": index}).encode()
    with open(path, "wb") as fh:
        fh.write(CODEC_MAGIC + struct.pack("<I", len(raw)) + raw)
        for b in blobs:
            fh.write(b)
    return path


def load_codec(path) -> LatentCodec:
    blob = Path(path).read_bytes()
    if blob[:4] != CODEC_MAGIC:
        raise PercepgenError(f"{path} is not a codec file")
    (n,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + n])
    payload = blob[8 + n:]
    codec = LatentCodec(CodecConfig(**header["config"]))
    sd = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        sd[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    codec.load_state_dict(sd)
    codec.eval()
    return codec


# --- server / client ------------------------------------------------------------------------


def server_latent(bundle: ModelBundle, codec: LatentCodec, img: Image, prompt: str) -> np.ndarray:
    """The server-side computation: enhance, then compress."""
    return codec.encode(bundle.enhance(img, prompt))


def local_reference(bundle: ModelBundle, codec: LatentCodec, img: Image, prompt: str) -> Image:
    return codec.decode(server_latent(bundle, codec, img, prompt))


def recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(1 << 16, n - got))
        if not chunk:
            raise ConnectionError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> Frame | None:
    """Read one frame; ``None`` on a clean close between frames."""
    first = sock.recv(HEADER_SIZE)
    if not first:
        return None
    header = first + (recv_exact(sock, HEADER_SIZE - len(first)) if len(first) < HEADER_SIZE else b"")
    version, kind, length = parse_header(header)
    payload = recv_exact(sock, length) if length else b""
    return Frame(kind, payload, version)


def handle_request(bundle, codec, frame: Frame) -> Frame:
    if frame.kind != FrameKind.REQUEST:
        return Frame(FrameKind.ERROR, error_payload(ErrorCode.BAD_KIND, f"expected a request, got kind {frame.kind}"))
    try:
        prompt, png = parse_request(frame.payload)
        img = decode_png(png)
        latent = server_latent(bundle, codec, img, prompt)
    except PromptParseError as exc:
        return Frame(FrameKind.ERROR, error_payload(ErrorCode.PROMPT, str(exc)))
    except FrameError as exc:
        return Frame(FrameKind.ERROR, error_payload(exc.code, str(exc)))
    except Exception as exc:  # report, keep serving
        log.exception("request failed")
        return Frame(FrameKind.ERROR, error_payload(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}"))
    return Frame(FrameKind.LATENT, latent_payload(latent))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except FrameError as exc:
                # stream position is unknown after a bad header; report and close
                sock.sendall(serialize_frame(Frame(FrameKind.ERROR, error_payload(exc.code, str(exc)))))
                return
            except (ConnectionError, OSError):
                return
            if frame is None:
                return
            reply = handle_request(self.server.bundle, self.server.codec, frame)
            try:
                sock.sendall(serialize_frame(reply))
            except OSError:
                return


class StreamingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, bundle: ModelBundle, codec: LatentCodec):
        super().__init__(address, _Handler)
        self.bundle = bundle
        self.codec = codec
        bundle.generator.eval()
        codec.eval()

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def serve(address, bundle: ModelBundle, codec: LatentCodec):
    """Serve forever on ``(host, port)``."""
    with StreamingServer(tuple(address), bundle, codec) as server:
        log.info("serving on %s:%d", *server.server_address[:2])
        server.serve_forever()


class StreamClient:
    """Persistent connection; decodes latents with a local copy of the codec."""

    def __init__(self, address, codec: LatentCodec | None = None, timeout: float = 60.0):
        self.codec = codec
        self.sock = socket.create_connection(tuple(address), timeout=timeout)
        self.bytes_received = 0

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request_latent(self, img: Image, prompt: str) -> np.ndarray:
        frame = Frame(FrameKind.REQUEST, request_payload(prompt, encode_png(img)))
        self.sock.sendall(serialize_frame(frame))
        reply = read_frame(self.sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        self.bytes_received += HEADER_SIZE + len(reply.payload)
        if reply.kind == FrameKind.ERROR:
            raise RemoteError(*parse_error(reply.payload))
        if reply.kind != FrameKind.LATENT:
            raise FrameError(ErrorCode.BAD_KIND, f"unexpected reply kind {reply.kind}")
        return parse_latent(reply.payload)

    def enhance(self, img: Image, prompt: str) -> Image:
        if self.codec is None:
            raise PercepgenError("client needs a codec to decode latents")
        return self.codec.decode(self.request_latent(img, prompt))


def request_enhance(address, img: Image, prompt: str, codec: LatentCodec) -> Image:
    with StreamClient(address, codec) as client:
        return client.enhance(img, prompt)
