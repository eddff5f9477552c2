"""The prediction backend: base64 pixel payloads in, class probabilities out.

A deliberately small HTTP/1.1 server on the standard library. The model is
loaded once and shared read-only across request threads; request handling
is pure, so identical request bytes always produce identical responses.

Routes:
  POST /predict   {format, width, height, data_b64} -> PredictResponse JSON
  GET  /labels    the 29 labels in index order
  GET  /healthz   {status, model_id, uptime_s}

CORS is permissive so a browser client on another origin can call us.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import models
from .errors import FormatError, SignForgeError
from .imaging import RgbImage, Yuv420Frame, base64_decode, preprocess

WIRE_FORMATS = ("rgb8", "yuv420", "ppm")
DEFAULT_PORT = 8080
DEFAULT_MAX_BODY_MIB = 8


@dataclass
class PredictionService:
    """Request-independent state shared by every handler thread."""

    model: models.Model | None = None
    model_id: str = "unloaded"

    def __post_init__(self):
        self.started = time.monotonic()
        self._lock = threading.Lock()
        self.requests_served = 0

    def count_request(self) -> None:
        with self._lock:
            self.requests_served += 1

    def health(self) -> dict:
        return {
            "status": "ok" if self.model is not None else "loading",
            "model_id": self.model_id,
            "uptime_s": time.monotonic() - self.started,
        }

    def predict_payload(self, body: bytes) -> tuple[int, dict]:
        """Full request pipeline; returns (http status, response object)."""
        if self.model is None:
            return 503, {"error": "model not loaded", "stage": "model"}
        try:
            request = json.loads(body)
        except (ValueError, UnicodeDecodeError) as exc:
            return 400, {"error": f"malformed JSON body: {exc}", "stage": "json"}
        if not isinstance(request, dict):
            return 400, {"error": "request body must be a JSON object", "stage": "json"}
        fmt = request.get("format")
        if fmt not in WIRE_FORMATS:
            return 415, {"error": f"unknown format {fmt!r}; expected one of "
                                  f"{list(WIRE_FORMATS)}", "stage": "format"}
        data_b64 = request.get("data_b64")
        if not isinstance(data_b64, str):
            return 400, {"error": "data_b64 must be a base64 string", "stage": "json"}
        started = time.perf_counter()
        try:
            raw = base64_decode(data_b64)
            payload = self._build_payload(fmt, request, raw)
            tensor = preprocess(payload)
            label, index, probs = models.predict(self.model, tensor)
        except SignForgeError as exc:
            stage = getattr(exc, "stage", None) or "predict"
            return 400, {"error": str(exc), "stage": stage}
        latency_ms = (time.perf_counter() - started) * 1000.0
        return 200, {
            "label": label,
            "index": index,
            "confidence": float(probs[index]),
            "probs": [float(p) for p in probs],
            "model_id": self.model_id,
            "latency_ms": latency_ms,
        }

    @staticmethod
    def _build_payload(fmt: str, request: dict, raw: bytes):
        if fmt == "ppm":
            return raw
        width, height = request.get("width"), request.get("height")
        if not isinstance(width, int) or not isinstance(height, int) \
                or width < 1 or height < 1:
            raise FormatError(f"format {fmt} needs positive integer width and "
                              f"height, got {width!r}x{height!r}", stage="geometry")
        try:
            if fmt == "rgb8":
                expected = width * height * 3
                if len(raw) != expected:
                    raise FormatError(f"rgb8 payload is {len(raw)} bytes, expected "
                                      f"{expected} for {width}x{height}",
                                      stage="geometry")
                return RgbImage(width, height, raw)
            expected = width * height * 3 // 2
            if len(raw) != expected:
                raise FormatError(f"yuv420 payload is {len(raw)} bytes, expected "
                                  f"{expected} for {width}x{height}", stage="geometry")
            luma = width * height
            chroma = luma // 4
            return Yuv420Frame(width, height, raw[:luma],
                               raw[luma:luma + chroma], raw[luma + chroma:])
        except FormatError as exc:
            if exc.stage is None:
                raise FormatError(str(exc), stage="geometry") from exc
            raise


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "signforge"

    @property
    def service(self) -> PredictionService:
        return self.server.service

    def log_message(self, fmt, *args):
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    def _send_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self._send_cors()
        self.end_headers()
        self.wfile.write(body)

    def _send_cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _drain(self, length: int, cap: int = 64 * 1024 * 1024) -> None:
        """Discards an oversized request body so the client can read our reply."""
        remaining = min(length, cap)
        while remaining > 0:
            chunk = self.rfile.read(min(remaining, 1 << 20))
            if not chunk:
                break
            remaining -= len(chunk)

    def do_OPTIONS(self):
        self.send_response(204)
        self._send_cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        self.service.count_request()
        if self.path == "/labels":
            self._send_json(200, list(models.LABELS))
        elif self.path == "/healthz":
            self._send_json(200, self.service.health())
        else:
            self._send_json(404, {"error": f"no such path {self.path}"})

    def do_POST(self):
        self.service.count_request()
        if self.path != "/predict":
            self._send_json(404, {"error": f"no such path {self.path}"})
            return
        length_header = self.headers.get("Content-Length")
        try:
            length = int(length_header)
        except (TypeError, ValueError):
            self._send_json(400, {"error": "missing or invalid Content-Length",
                                  "stage": "http"})
            return
        if length > self.server.max_body_bytes:
            self._drain(length)
            self._send_json(413, {"error": f"body of {length} bytes exceeds the "
                                           f"{self.server.max_body_bytes} byte limit"})
            return
        body = self.rfile.read(length)
        status, payload = self.service.predict_payload(body)
        self._send_json(status, payload)


class SignForgeServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: PredictionService,
                 max_body_mib: int = DEFAULT_MAX_BODY_MIB, verbose: bool = False):
        super().__init__(address, _Handler)
        self.service = service
        self.max_body_bytes = max_body_mib * 1024 * 1024
        self.verbose = verbose


def load_service(weights_path, model_kind: str) -> PredictionService:
    """Builds the configured architecture and installs the weight file."""
    import os

    if model_kind == "asl_cnn":
        model = models.build_asl_cnn()
    elif model_kind == "vgg16_transfer":
        model = models.build_vgg16_transfer(random_init=True)
    else:
        raise FormatError(f"unknown model kind {model_kind!r}")
    models.load_weights(model, weights_path)
    return PredictionService(model=model, model_id=os.path.basename(str(weights_path)))


def make_server(service: PredictionService, host: str = "127.0.0.1",
                port: int = DEFAULT_PORT,
                max_body_mib: int = DEFAULT_MAX_BODY_MIB,
                verbose: bool = False) -> SignForgeServer:
    return SignForgeServer((host, port), service, max_body_mib, verbose)
