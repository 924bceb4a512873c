"""Chat-completions endpoint over an adapter checkpoint.

Speaks the same wire protocol the pipeline's gateway client sends:
POST /v1/chat/completions with [system, user] messages. Decoding is
greedy, so identical requests yield identical responses; temperature is
accepted and ignored. Malformed bodies get a protocol-level 400.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from pathlib import Path

import torch
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import TrainerError
from .model import TinyCausalLM
from .tokenizer import END, decode_ids, encode_chat
from .train import load_checkpoint

DEFAULT_MAX_NEW_TOKENS = 256


@torch.no_grad()
def greedy_decode(model: TinyCausalLM, system: str, user: str, max_new_tokens: int) -> tuple[str, str]:
    """Generate until <|end|> or the token budget; returns (text, finish_reason)."""
    ids = encode_chat(system, user).ids
    budget_left = model.config.max_seq - len(ids)
    if budget_left <= 0:
        return "", "length"
    max_new_tokens = min(max_new_tokens, budget_left)
    generated: list[int] = []
    sequence = torch.tensor([ids], dtype=torch.long)
    for _ in range(max_new_tokens):
        logits = model(sequence)
        next_id = int(logits[0, -1].argmax().item())
        if next_id == END:
            return decode_ids(generated), "stop"
        generated.append(next_id)
        sequence = torch.cat([sequence, torch.tensor([[next_id]])], dim=1)
    return decode_ids(generated), "length"


def _bad_request(detail: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"error": {"message": detail}})


def create_app(model: TinyCausalLM, model_name: str = "pertcot-student",
               max_new_tokens_cap: int = DEFAULT_MAX_NEW_TOKENS) -> FastAPI:
    app = FastAPI()
    lock = threading.Lock()  # sequential decoding; the model is not thread-safe

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            return _bad_request("request body is not valid JSON")
        if not isinstance(body, dict):
            return _bad_request("request body must be a JSON object")
        messages = body.get("messages")
        if not isinstance(messages, list) or not messages:
            return _bad_request("messages must be a non-empty list")
        system_text = ""
        user_text = None
        for message in messages:
            if not isinstance(message, dict) or "role" not in message or "content" not in message:
                return _bad_request("each message needs role and content")
            if not isinstance(message["content"], str):
                return _bad_request("message content must be a string")
            if message["role"] == "system":
                system_text = message["content"]
            elif message["role"] == "user":
                user_text = message["content"]
        if user_text is None:
            return _bad_request("a user message is required")
        max_tokens = body.get("max_tokens", max_new_tokens_cap)
        if not isinstance(max_tokens, int) or max_tokens < 1:
            return _bad_request("max_tokens must be a positive integer")

        with lock:
            text, finish_reason = greedy_decode(
                model, system_text, user_text, min(max_tokens, max_new_tokens_cap))
        return {
            "id": "chatcmpl-local",
            "object": "chat.completion",
            "model": body.get("model") or model_name,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": finish_reason,
            }],
        }

    @app.get("/health")
    async def health():
        return {"status": "ok"}

    return app


def _ensure_port_free(host: str, port: int) -> None:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
        try:
            probe.bind((host, port))
        except OSError as exc:
            raise TrainerError(f"port {port} is already in use: {exc}") from exc


class ServerHandle:
    """A serving endpoint running in a background thread (used by tests and the CLI)."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, port: int):
        self._server = server
        self._thread = thread
        self.port = port
        self.base_url = f"http://127.0.0.1:{port}"

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)


def serve_for_eval(checkpoint_dir: Path | str, port: int, host: str = "127.0.0.1",
                   background: bool = False, max_new_tokens_cap: int = DEFAULT_MAX_NEW_TOKENS):
    """Serve a checkpoint over the chat-completions protocol.

    Blocks unless `background=True`, in which case a ServerHandle comes back
    once the server accepts connections.
    """
    _ensure_port_free(host, port)
    model, metadata = load_checkpoint(checkpoint_dir)
    app = create_app(model, model_name=metadata.get("tool", "pertcot-student"),
                     max_new_tokens_cap=max_new_tokens_cap)
    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    if not background:
        server.run()
        return None
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started:
        if time.monotonic() > deadline:
            raise TrainerError("server did not start within 15s")
        time.sleep(0.02)
    return ServerHandle(server, thread, port)
