"""Transcript segmentation and the step-summarizer interface.

A summarizer turns a chunk of narration sentences into short procedural steps. Three
backends share one batch contract (``requests -> {segment_id: steps | None}``):

* :class:`MockSummarizer`, a deterministic rule set used for tests and offline runs;
* :class:`FileSummarizer`, reading a pre-filled ``responses.jsonl``;
* :class:`CommandSummarizer`, writing ``requests.jsonl`` and invoking an external program.
"""

from __future__ import annotations

import logging
import re
import shlex
import subprocess
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .datamodel import LoadError, Sentence, TextTrack, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

TRANSCRIPT_SLOT = "<ASR transcript>"


def canonical_prompt() -> str:
    return resources.files("stepalign").joinpath("data/summarize_prompt.txt").read_text("utf-8").strip()


@dataclass
class TranscriptSegment:
    video_id: str
    index: int
    sentences: list[Sentence]

    @property
    def segment_id(self) -> str:
        return f"{self.video_id}:{self.index}"


@dataclass
class SummarizerRequest:
    segment_id: str
    prompt: str
    sentences: list[str]

    def to_json(self) -> dict:
        return {"segment_id": self.segment_id, "prompt": self.prompt, "sentences": self.sentences}


def segment_transcript(track: TextTrack, target: int = 10) -> list[TranscriptSegment]:
    """Contiguous chunks of ``target`` sentences; a short tail (< target/2) joins the chunk before it."""
    if track.mode != "narration":
        raise ValueError("only narration tracks can be segmented")
    if target < 1:
        raise ValueError("target must be >= 1")
    chunks = [track.sentences[i:i + target] for i in range(0, len(track.sentences), target)]
    if len(chunks) > 1 and len(chunks[-1]) < target / 2:
        tail = chunks.pop()
        chunks[-1] = chunks[-1] + tail
    return [TranscriptSegment(track.video_id, i + 1, c) for i, c in enumerate(chunks)]


def make_request(segment: TranscriptSegment, prompt: str | None = None) -> SummarizerRequest:
    texts = [s.text for s in segment.sentences]
    prompt = (prompt or canonical_prompt()).replace(TRANSCRIPT_SLOT, " ".join(texts))
    return SummarizerRequest(segment.segment_id, prompt, texts)


_NUMBERING = re.compile(r"^\s*(?:\d+[.):]|[-*])\s*")


def parse_steps(lines) -> list[str]:
    """Strip list numbering/bullets and blank lines from model output."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    return [s for s in (_NUMBERING.sub("", line).strip() for line in lines) if s]


class MockSummarizer:
    """Drops filler talk, strips leading discourse markers, de-duplicates exact repeats."""

    FILLER = [re.compile(p) for p in (
        r"\b(hey|hi|hello)\b.*\b(guys|everyone|everybody|there|folks)\b",
        r"\bwelcome( back)?\b",
        r"\bsubscribe\b",
        r"\bmy channel\b",
        r"\bthanks? (you )?for watching\b",
        r"\bin the comments\b",
        r"\bsee you (next time|soon)\b",
    )]
    MARKERS = re.compile(r"^(?:(?:so|now|okay|ok|alright|and|then|next|um|uh|well)\b[\s,]*)+")

    def summarize_one(self, request: SummarizerRequest) -> list[str]:
        steps, seen = [], set()
        for text in request.sentences:
            t = " ".join(text.lower().split())
            if not t or any(p.search(t) for p in self.FILLER):
                continue
            t = self.MARKERS.sub("", t).strip()
            if t and t not in seen:
                seen.add(t)
                steps.append(t)
        return steps

    def __call__(self, requests: list[SummarizerRequest]) -> dict:
        return {r.segment_id: self.summarize_one(r) for r in requests}


class FileSummarizer:
    def __init__(self, responses_path):
        self.path = Path(responses_path)

    def __call__(self, requests: list[SummarizerRequest]) -> dict:
        table = {}
        for lineno, d in read_jsonl(self.path):
            try:
                table[str(d["segment_id"])] = parse_steps(d["steps"])
            except (KeyError, TypeError) as e:
                raise LoadError(f"{self.path}:{lineno}: {e}") from e
        out = {}
        for r in requests:
            if r.segment_id not in table:
                log.warning("no response for segment %s", r.segment_id)
            out[r.segment_id] = table.get(r.segment_id)
        return out


class CommandSummarizer:
    """Runs ``command REQUESTS RESPONSES``; the program must write responses.jsonl."""

    def __init__(self, command: str, workdir, timeout: float | None = None):
        self.command = shlex.split(command)
        self.workdir = Path(workdir)
        self.timeout = timeout

    def __call__(self, requests: list[SummarizerRequest]) -> dict:
        self.workdir.mkdir(parents=True, exist_ok=True)
        req = self.workdir / "requests.jsonl"
        resp = self.workdir / "responses.jsonl"
        write_jsonl(req, (r.to_json() for r in requests))
        try:
            subprocess.run(self.command + [str(req), str(resp)], check=True, timeout=self.timeout)
        except (OSError, subprocess.SubprocessError) as e:
            log.error("summarizer command failed: %s", e)
            return {r.segment_id: None for r in requests}
        return FileSummarizer(resp)(requests)


def summarize(segments: list[TranscriptSegment], summarizer, prompt: str | None = None):
    """Summarize every segment in order.

    Returns ``(steps, failed)``: the concatenated step strings for the video(s) and the ids of
    segments whose summarization failed (those contribute no steps).
    """
    requests = [make_request(s, prompt) for s in segments]
    try:
        responses = summarizer(requests)
    except Exception as e:  # backend failures must not stop the pipeline
        log.error("summarizer raised %s", e)
        responses = {}
    steps, failed = [], []
    for r in requests:
        out = responses.get(r.segment_id)
        if out is None:
            failed.append(r.segment_id)
            log.warning("segment %s failed to summarize", r.segment_id)
            continue
        steps.extend(out)
    return steps, failed
