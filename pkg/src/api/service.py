#!/usr/bin/env python3
"""
OpenAI-Compatible Verdict Service for AirShield

Serves the offline verdict backend over the chat-completions wire protocol,
so the remote gateway path can be exercised end-to-end on one machine.

Features:
- OpenAI-compatible chat completions endpoint (non-streaming)
- Verdicts from a trained detector document (AIRSHIELD_DETECTOR_PATH)
- Canned explanations for the three explanation prompts
- Health check and service info endpoints
"""

import logging
import os
import time
import uuid
from pathlib import Path
from typing import Dict, List, Optional

import uvicorn
from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from src.api.llm_gateway import MockVerdictBackend
from src.core.detector import DetectorModel, detector_from_document
from src.core.errors import DetectorError

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

DETECTOR_PATH_ENV = "AIRSHIELD_DETECTOR_PATH"
SERVICE_MODEL_NAME = "airshield-verdict"


# OpenAI-compatible request/response models
class ChatMessage(BaseModel):
    role: str = Field(..., description="The role of the message author")
    content: str = Field(..., description="The content of the message")
    name: Optional[str] = Field(None, description="The name of the author")


class ChatCompletionRequest(BaseModel):
    model: str = Field(default=SERVICE_MODEL_NAME, description="Model identifier")
    messages: List[ChatMessage] = Field(..., min_length=1, description="List of messages in the conversation")
    temperature: Optional[float] = Field(0.0, ge=0, le=2, description="Sampling temperature (ignored, answers are deterministic)")
    max_tokens: Optional[int] = Field(2048, ge=1, description="Maximum tokens to generate")
    stream: Optional[bool] = Field(False, description="Streaming is not supported")


class ChatCompletionChoice(BaseModel):
    index: int
    message: ChatMessage
    finish_reason: str


class ChatCompletionResponse(BaseModel):
    id: str
    object: str = "chat.completion"
    created: int
    model: str
    choices: List[ChatCompletionChoice]
    usage: Dict[str, int]


class ServiceInfo(BaseModel):
    name: str = "AirShield Verdict API"
    version: str = "1.0.0"
    description: str = "OpenAI-compatible benign/malicious verdicts for wireless telemetry records"
    detector_kind: Optional[str] = None
    features: List[str] = [
        "Verdicts in round brackets: (Benign) or (Malicious)",
        "Deterministic answers from a trained detector",
        "Canned explanations for reasoning, feature importance and pair comparison prompts",
    ]
    endpoints: Dict[str, str] = {
        "chat_completions": "/v1/chat/completions",
        "health": "/health",
        "info": "/info",
    }


def load_detector(path: Optional[str] = None) -> DetectorModel:
    """Read the detector document named by the argument or AIRSHIELD_DETECTOR_PATH"""
    path = path or os.getenv(DETECTOR_PATH_ENV)
    if not path:
        raise DetectorError(f"{DETECTOR_PATH_ENV} is not set", code="no_detector")
    if not Path(path).exists():
        raise DetectorError(f"detector document not found: {path}", code="no_detector")
    detector = detector_from_document(Path(path).read_text(encoding="utf-8"))
    logger.info(f"✅ Loaded {detector.kind.value} detector from {path}")
    return detector


def create_app(detector: Optional[DetectorModel] = None) -> FastAPI:
    """Build the service; without a detector it is loaded from the environment on first use"""
    app = FastAPI(
        title="AirShield Verdict API",
        description="OpenAI-compatible verdict service over a trained AirShield detector",
        version="1.0.0",
        docs_url="/docs",
        redoc_url="/redoc",
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    state = {"backend": MockVerdictBackend(detector) if detector is not None else None}

    def get_backend() -> MockVerdictBackend:
        if state["backend"] is None:
            try:
                state["backend"] = MockVerdictBackend(load_detector())
            except DetectorError as e:
                logger.error(f"❌ No detector available: {e}")
                raise HTTPException(status_code=503, detail=str(e))
        return state["backend"]

    @app.get("/health")
    async def health_check():
        """Health check endpoint"""
        return {"status": "healthy", "detector_loaded": state["backend"] is not None}

    @app.get("/info", response_model=ServiceInfo)
    async def service_info():
        """Get service information"""
        backend = state["backend"]
        return ServiceInfo(detector_kind=backend.detector.kind.value if backend else None)

    @app.post("/v1/chat/completions", response_model=ChatCompletionResponse)
    def chat_completions(request: ChatCompletionRequest):
        """OpenAI-compatible chat completions endpoint"""
        if request.stream:
            raise HTTPException(status_code=400, detail="streaming responses are not supported")
        backend = get_backend()

        system = "\n".join(m.content for m in request.messages if m.role == "system")
        user_messages = [m.content for m in request.messages if m.role == "user"]
        if not user_messages:
            raise HTTPException(status_code=400, detail="a user message is required")

        result = backend.complete(system, user_messages[-1])
        counts = result.token_counts or {"prompt": 0, "completion": 0}
        return ChatCompletionResponse(
            id=f"chatcmpl-{uuid.uuid4().hex[:29]}",
            created=int(time.time()),
            model=request.model,
            choices=[
                ChatCompletionChoice(
                    index=0,
                    message=ChatMessage(role="assistant", content=result.text),
                    finish_reason="stop",
                )
            ],
            usage={
                "prompt_tokens": counts["prompt"],
                "completion_tokens": counts["completion"],
                "total_tokens": counts["prompt"] + counts["completion"],
            },
        )

    return app


app = create_app()


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="AirShield verdict service")
    parser.add_argument("detector", nargs="?", help=f"Detector document (default: ${DETECTOR_PATH_ENV})")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args()

    if args.detector:
        os.environ[DETECTOR_PATH_ENV] = args.detector
    print(f"🛡️  Verdicts at http://{args.host}:{args.port}/v1/chat/completions")
    uvicorn.run("src.api.service:app", host=args.host, port=args.port, log_level="info")
