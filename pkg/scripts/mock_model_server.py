#!/usr/bin/env python3
"""Standalone scripted model endpoint for driving the CLI end to end.

Speaks the chat-completions/embeddings/completions wire shapes and steers
every pipeline stage deterministically: documents whose marker id ends in
an odd digit are judged as having a critical failure, everything else
passes cleanly. Run: python scripts/mock_model_server.py <port>
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

MARKER = re.compile(r"\[\[id=([\w-]+)\]\]")
NUMBERED = re.compile(r"^\s*(\d+)\.\s", re.MULTILINE)

VERBS = ("measure", "cut", "sand", "drill", "clamp", "paint", "align",
         "fasten", "inspect", "polish", "rinse", "dry", "label", "store",
         "trim", "seal")
NOUNS = ("board", "edge", "bracket", "panel", "hinge", "frame", "surface",
         "joint", "fitting", "handle", "cover", "base", "corner", "slot",
         "rail", "seam")


def steps(n: int) -> list[str]:
    return [f"{VERBS[i]} the {NOUNS[i]} carefully" for i in range(n)]


def numbered(items: list[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(items, start=1))


def chat_reply(prompt: str) -> str:
    match = MARKER.search(prompt)
    doc_id = match.group(1) if match else "doc-x"
    if "Write the steps that achieve each goal" in prompt:
        n = int(prompt.split("Required number of steps: ")[-1].split("\n")[0])
        return numbered(steps(n))
    if "You are judging whether" in prompt:
        if doc_id[-1].isdigit() and int(doc_id[-1]) % 2 == 1:
            return json.dumps({"failures": [
                {"description": "omits a required action",
                 "reference_step_refs": [1], "generated_step_refs": []}]})
        return '{"failures": []}'
    if "Decide whether it contains a single well-formed sequential procedure" in prompt:
        return f"GOAL: Achieve the task [[id={doc_id}]]\nSTEPS:\n{numbered(steps(7))}"
    if "You are screening candidate procedures" in prompt:
        return "PASS"
    if "Rewrite the goal" in prompt:
        tail = prompt.split("Original steps:", 1)[1]
        n = len(NUMBERED.findall(tail))
        refined = [f"precisely {s}" for s in steps(n)]
        return f"GOAL: Precisely achieve the task [[id={doc_id}]]\nSTEPS:\n{numbered(refined)}"
    if "List the resources" in prompt:
        return "RESOURCES: clamp; sealant"
    if "final sanity check" in prompt:
        return "VALID"
    return "PASS"


def embedding(text: str, dim: int = 16) -> list[float]:
    vec = [0.0] * dim
    for token in text.split():
        digest = hashlib.sha256(token.encode()).digest()
        vec[digest[0] % dim] += 1.0 if digest[1] % 2 == 0 else -1.0
    norm = math.sqrt(sum(x * x for x in vec)) or 1.0
    return [x / norm for x in vec]


class Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.path.endswith("/chat/completions"):
            payload = {"choices": [{"message": {"content": chat_reply(
                body["messages"][0]["content"])}}]}
        elif self.path.endswith("/embeddings"):
            payload = {"data": [{"index": i, "embedding": embedding(t)}
                                for i, t in enumerate(body["input"])]}
        elif self.path.endswith("/completions"):
            text = body["prompt"]
            tokens, offsets, pos = [], [], 0
            for token in text.split():
                start = text.index(token, pos)
                tokens.append(token)
                offsets.append(start)
                pos = start + len(token)
            payload = {"choices": [{"text": text, "logprobs": {
                "tokens": tokens,
                "token_logprobs": [math.log(0.5)] * len(tokens),
                "text_offset": offsets}}]}
        else:
            self.send_response(404)
            self.end_headers()
            return
        blob = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)


if __name__ == "__main__":
    port = int(sys.argv[1]) if len(sys.argv) > 1 else 8300
    server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
    print(f"mock model endpoint on 127.0.0.1:{port}", flush=True)
    server.serve_forever()
