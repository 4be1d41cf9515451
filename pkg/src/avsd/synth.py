"""Template dialogs whose answers are planted in feature channels.

Each planted question is tied to one (modality, channel) pair, one question
per modality. A video's answer is "yes" when that channel's mean over frames is
positive, otherwise "no", so a model can only answer it by reading the
features. The remaining questions have fixed answers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MODALITY_DIMS, DialogExample, write_dialogs, write_features

SYNTH_MODALITIES = (("i3d_rgb", MODALITY_DIMS["i3d_rgb"]), ("vggish", MODALITY_DIMS["vggish"]))


@dataclass(frozen=True)
class PlantedQuestion:
    """A question whose answer is ``yes`` iff ``modality[:, channel]`` has positive mean.

    ``modality=None`` marks a feature-independent question that always gets ``yes``.
    """

    question: str
    modality: str | None
    channel: int
    yes: str
    no: str = ""


QUESTIONS = (
    PlantedQuestion(
        "is there any sound in the video?",
        "vggish",
        0,
        "yes, loud music is playing in the background.",
        "no, it is completely silent the whole time.",
    ),
    PlantedQuestion(
        "is the person moving around the room?",
        "i3d_rgb",
        0,
        "yes, someone walks around the room the whole time.",
        "no, nobody moves, they just sit on the couch.",
    ),
    PlantedQuestion("what room are they in?", None, 0, "they are sitting in a small living room at home."),
    PlantedQuestion("how many people are there?", None, 0, "there is only one person in the whole video."),
)

CAPTIONS = ("a person is in a room.", "someone is at home in a room.")


def planted_answer(q: PlantedQuestion, features: dict[str, np.ndarray]) -> str:
    if q.modality is None:
        return q.yes
    return q.yes if float(features[q.modality][:, q.channel].mean()) > 0 else q.no


def question_by_text(text: str) -> PlantedQuestion:
    for q in QUESTIONS:
        if q.question == text:
            return q
    raise KeyError(text)


@dataclass
class SynthConfig:
    train: int = 20
    dev: int = 5
    test: int = 5
    rounds: int = 3
    seed: int = 0
    min_frames: int = 4
    max_frames: int = 8
    noise: float = 0.01


def synth_video(rng: np.random.Generator, cfg: SynthConfig) -> dict[str, np.ndarray]:
    feats = {}
    for m, dim in SYNTH_MODALITIES:
        T = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        x = rng.normal(0.0, cfg.noise, size=(T, dim))
        for q in QUESTIONS:
            if q.modality == m:
                sign = 1.0 if rng.random() < 0.5 else -1.0
                x[:, q.channel] = sign * rng.uniform(0.5, 1.5, size=T)
        feats[m] = x.astype(np.float32)
    return feats


def synth_dialog(video_id: str, rng: np.random.Generator, cfg: SynthConfig) -> tuple[DialogExample, dict[str, np.ndarray]]:
    feats = synth_video(rng, cfg)
    if cfg.rounds <= len(QUESTIONS):
        picks = rng.permutation(len(QUESTIONS))[: cfg.rounds]
    else:
        picks = rng.integers(0, len(QUESTIONS), size=cfg.rounds)
    rounds = [(QUESTIONS[i].question, planted_answer(QUESTIONS[i], feats)) for i in picks]
    caption = CAPTIONS[int(rng.integers(len(CAPTIONS)))]
    return DialogExample(video_id, rounds, caption), feats


def generate(cfg: SynthConfig) -> dict[str, list[tuple[DialogExample, dict[str, np.ndarray]]]]:
    if min(cfg.train, cfg.dev, cfg.test, cfg.rounds) < 1:
        raise ValueError("synthetic corpus counts must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for split, n in (("train", cfg.train), ("dev", cfg.dev), ("test", cfg.test)):
        out[split] = [synth_dialog(f"{split}{i:04d}", rng, cfg) for i in range(n)]
    return out


def write_corpus(out_dir, cfg: SynthConfig) -> dict[str, Path]:
    """Write ``{train,dev,test}.json`` and ``features/<modality>/<video>.mmf``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, items in generate(cfg).items():
        path = out_dir / f"{split}.json"
        write_dialogs(path, [ex for ex, _ in items])
        for ex, feats in items:
            for m, x in feats.items():
                write_features(out_dir / "features", ex.video_id, m, x)
        paths[split] = path
    paths["features"] = out_dir / "features"
    return paths
