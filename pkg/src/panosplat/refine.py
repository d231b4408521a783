"""Iterative generate-critique-regenerate loop over panorama hooks.

Round 0 is generated from the initial prompt. Before each later round the
critic scores the previous panorama and emits the prompt for the new one;
after the final round the critic scores it too, so every surviving round
carries a score. The best round is the highest-scoring one, earliest on
ties; with no scores at all (no critic, or it failed immediately) round 0
wins. A generator failure aborts after persisting the partial history; a
critic failure just stops the loop.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .fileio import write_png
from .hooks import CriticResult

GeneratorHook = Callable[[str, Optional[np.ndarray]], np.ndarray]
CriticHook = Callable[[np.ndarray, str], CriticResult]


@dataclass
class RefinementRound:
    round: int
    prompt: str
    panorama_path: str
    critic_score: Optional[float] = None
    critic_feedback: Optional[str] = None


def load_session_log(path) -> list[RefinementRound]:
    records = json.loads(Path(path).read_text())
    return [RefinementRound(**r) for r in records]


def select_best(history: list[RefinementRound]) -> RefinementRound:
    """Highest critic score wins; ties and score-free histories go to the
    earliest round."""
    if not history:
        raise ValueError("history is empty")
    best = history[0]
    for r in history[1:]:
        if r.critic_score is not None and (
            best.critic_score is None or r.critic_score > best.critic_score
        ):
            best = r
    return best


def run_refinement(
    initial_prompt: str,
    generator: GeneratorHook,
    critic: Optional[CriticHook],
    max_rounds: int,
    session_dir,
    superres: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[RefinementRound, list[RefinementRound]]:
    """Run up to max_rounds + 1 generation rounds; returns (best, history).

    Panoramas land in session_dir as round_XXX.png; the session log
    (session.json) is rewritten after every recorded event so partial
    histories survive hook failures.
    """
    if max_rounds < 0:
        raise ValueError(f"max_rounds must be >= 0, got {max_rounds}")
    session_dir = Path(session_dir)
    session_dir.mkdir(parents=True, exist_ok=True)
    log_path = session_dir / "session.json"

    history: list[RefinementRound] = []

    def persist() -> None:
        log_path.write_text(json.dumps([asdict(r) for r in history], indent=2, sort_keys=True))

    prompt = initial_prompt
    prev_image: Optional[np.ndarray] = None
    critic_failed = False

    for r in range(max_rounds + 1):
        if r > 0:
            assert critic is not None
            try:
                result = critic(prev_image, history[-1].prompt)
            except Exception:
                critic_failed = True
                break
            history[-1].critic_score = float(result.score)
            history[-1].critic_feedback = result.feedback
            persist()
            prompt = result.prompt

        try:
            image = generator(prompt, prev_image)
        except Exception:
            persist()
            raise

        pano_path = session_dir / f"round_{r:03d}.png"
        write_png(pano_path, image, bit_depth=8)
        history.append(RefinementRound(round=r, prompt=prompt, panorama_path=str(pano_path)))
        persist()
        prev_image = np.asarray(image, dtype=np.float64)

        if critic is None or max_rounds == 0:
            break

    if critic is not None and max_rounds > 0 and not critic_failed:
        # score the final round; its emitted prompt is discarded
        try:
            result = critic(prev_image, history[-1].prompt)
            history[-1].critic_score = float(result.score)
            history[-1].critic_feedback = result.feedback
            persist()
        except Exception:
            pass

    best = select_best(history)
    if superres is not None:
        from .fileio import read_png

        upscaled = superres(read_png(best.panorama_path))
        write_png(session_dir / "best_upscaled.png", upscaled, bit_depth=8)
    persist()
    return best, history
