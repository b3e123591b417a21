"""Deterministic stage-prompt construction from versioned template files.

Templates are plain text with named placeholders and ship inside the
package; a directory of same-named files can override them. The builder
exposes a version id derived from the template contents, and that id is
written into every decision record so replay can detect template drift.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .selector import answer_key

TEMPLATE_NAMES = (
    "stage1_system.txt",
    "stage1_user.txt",
    "stage2_system.txt",
    "stage2_user.txt",
    "stage3_system.txt",
    "stage3_user.txt",
)


class EmptyModalityListError(Exception):
    """Stage 1 cannot be prompted without at least one known modality."""


class NoCandidatesError(Exception):
    """Stage 3 cannot be prompted without at least one candidate card."""


@dataclass(frozen=True)
class StagePrompt:
    """A fully rendered prompt for one stage.

    ``includes_image`` states whether the request built from this prompt
    must attach the input image; stage 3 always masks it.
    """

    stage: int
    system_prompt: str
    user_prompt: str
    includes_image: bool

    def digest(self) -> str:
        payload = "\x1f".join(
            (str(self.stage), self.system_prompt, self.user_prompt, str(int(self.includes_image)))
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _load_templates(template_dir: Path | None) -> dict[str, str]:
    loaded: dict[str, str] = {}
    if template_dir is None:
        package_root = resources.files("card_router").joinpath("templates")
        for name in TEMPLATE_NAMES:
            loaded[name] = package_root.joinpath(name).read_text(encoding="utf-8")
    else:
        for name in TEMPLATE_NAMES:
            loaded[name] = (template_dir / name).read_text(encoding="utf-8")
    return loaded


class PromptBuilder:
    """Builds the three stage prompts; pure given the loaded templates."""

    def __init__(self, template_dir: str | Path | None = None) -> None:
        self._templates = _load_templates(Path(template_dir) if template_dir else None)
        hasher = hashlib.sha256()
        for name in TEMPLATE_NAMES:
            hasher.update(name.encode("utf-8"))
            hasher.update(b"\x00")
            hasher.update(self._templates[name].encode("utf-8"))
            hasher.update(b"\x00")
        self.version = hasher.hexdigest()[:12]

    def build_stage1(self, modalities: Sequence[str]) -> StagePrompt:
        """Modality identification over the deduplicated known-scan list."""
        if not modalities:
            raise EmptyModalityListError("no modalities to offer at stage 1")
        listing = "\n".join(f"- {m}" for m in modalities)
        return StagePrompt(
            stage=1,
            system_prompt=self._templates["stage1_system.txt"].rstrip("\n"),
            user_prompt=self._templates["stage1_user.txt"].format(modalities=listing).rstrip("\n"),
            includes_image=True,
        )

    def build_stage2(self, modality: str) -> StagePrompt:
        """Primary-abnormality identification, conditioned on the stage-1 modality."""
        if not modality.strip():
            raise ValueError("modality must be non-empty")
        return StagePrompt(
            stage=2,
            system_prompt=self._templates["stage2_system.txt"].rstrip("\n"),
            user_prompt=self._templates["stage2_user.txt"].format(modality=modality).rstrip("\n"),
            includes_image=True,
        )

    def build_stage3(
        self, modality: str, abnormality: str, candidates: Sequence[tuple[str, str]]
    ) -> StagePrompt:
        """Card selection over enumerated candidates; the image is masked.

        ``candidates`` are (id, task_caption) pairs in repository order.
        """
        if not candidates:
            raise NoCandidatesError(f"no candidate cards for modality {modality!r}")
        if not abnormality.strip():
            raise ValueError("abnormality must be non-empty")
        if answer_key(abnormality) == "normal":
            raise ValueError("stage 3 must not be prompted with a Normal finding")
        listing = "\n".join(f"- {card_id}: {caption}" for card_id, caption in candidates)
        user = self._templates["stage3_user.txt"].format(
            modality=modality, abnormality=abnormality, candidates=listing
        )
        return StagePrompt(
            stage=3,
            system_prompt=self._templates["stage3_system.txt"].rstrip("\n"),
            user_prompt=user.rstrip("\n"),
            includes_image=False,
        )


_default_builder: PromptBuilder | None = None


def default_prompt_builder() -> PromptBuilder:
    """Shared builder over the packaged templates."""
    global _default_builder
    if _default_builder is None:
        _default_builder = PromptBuilder()
    return _default_builder
