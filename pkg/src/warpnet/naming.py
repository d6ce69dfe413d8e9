"""Hierarchical content names: ``x.y/<application>/<folder>/.../<appendix>``.

Folders and appendixes are anonymized 128-bit hex segments.  Two literal
segments are reserved: ``tu`` (the thread-update sub-folder of a folder) and
the all-zero appendix that names an application's index object.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Union

SEGMENT_LEN = 32
TU_SEGMENT = "tu"
INDEX_SEGMENT = "0" * SEGMENT_LEN

_HEX_RE = re.compile(r"[0-9a-f]{32}")
_IDENT_RE = re.compile(r"[^/.\s]+")
_APP_RE = re.compile(r"[a-z0-9_-]{1,64}")


class MalformedName(ValueError):
    pass


class NoParent(ValueError):
    pass


def is_segment(seg: str) -> bool:
    return bool(_HEX_RE.fullmatch(seg))


def _check_identity(ia: str, user: str) -> None:
    if not (_IDENT_RE.fullmatch(ia) and _IDENT_RE.fullmatch(user)):
        raise MalformedName(f"bad identity segment {ia!r}.{user!r}")


def _check_application(app: str) -> None:
    if not _APP_RE.fullmatch(app):
        raise MalformedName(f"bad application identifier {app!r}")


def _check_folder(seg: str) -> None:
    if seg != TU_SEGMENT and not is_segment(seg):
        raise MalformedName(f"folder segment is not anonymized: {seg!r}")


@dataclass(frozen=True, order=True)
class FolderName:
    ia: str
    user: str
    application: str
    folders: tuple[str, ...] = ()

    def __post_init__(self):
        _check_identity(self.ia, self.user)
        _check_application(self.application)
        object.__setattr__(self, "folders", tuple(self.folders))
        for seg in self.folders:
            _check_folder(seg)

    @property
    def producer(self) -> str:
        return f"{self.ia}.{self.user}"

    @property
    def segments(self) -> tuple[str, ...]:
        return (self.producer, self.application, *self.folders)

    @property
    def depth(self) -> int:
        return len(self.folders)

    @property
    def is_application_prefix(self) -> bool:
        return not self.folders

    @property
    def application_prefix(self) -> "FolderName":
        return FolderName(self.ia, self.user, self.application)

    def child(self, segment: str) -> "FolderName":
        return FolderName(self.ia, self.user, self.application, (*self.folders, segment))

    def name(self, appendix: str) -> "ContentName":
        return ContentName(self.ia, self.user, self.application, self.folders, appendix)

    def ancestors(self) -> list["FolderName"]:
        """This folder and every ancestor up to the application prefix, nearest first."""
        out = [self]
        while out[-1].folders:
            out.append(parent_folder(out[-1]))
        return out

    def __str__(self) -> str:
        return "/".join(self.segments)


@dataclass(frozen=True, order=True)
class ContentName:
    ia: str
    user: str
    application: str
    folders: tuple[str, ...]
    appendix: str

    def __post_init__(self):
        _check_identity(self.ia, self.user)
        _check_application(self.application)
        object.__setattr__(self, "folders", tuple(self.folders))
        for seg in self.folders:
            _check_folder(seg)
        if not is_segment(self.appendix):
            raise MalformedName(f"appendix is not anonymized: {self.appendix!r}")

    @property
    def producer(self) -> str:
        return f"{self.ia}.{self.user}"

    @property
    def folder(self) -> FolderName:
        return FolderName(self.ia, self.user, self.application, self.folders)

    @property
    def segments(self) -> tuple[str, ...]:
        return (self.producer, self.application, *self.folders, self.appendix)

    def __str__(self) -> str:
        return "/".join(self.segments)


AnyName = Union[ContentName, FolderName]


def _split(text: str) -> list[str]:
    parts = text.split("/")
    if any(p == "" for p in parts):
        raise MalformedName(f"empty segment in {text!r}")
    return parts


def _split_identity(seg: str) -> tuple[str, str]:
    ia, dot, user = seg.partition(".")
    if not dot or not ia or not user or "." in user:
        raise MalformedName(f"first segment must be x.y, got {seg!r}")
    return ia, user


def parse_name(text: str) -> ContentName:
    parts = _split(text)
    if len(parts) < 3:
        raise MalformedName(f"need at least three segments: {text!r}")
    ia, user = _split_identity(parts[0])
    return ContentName(ia, user, parts[1], tuple(parts[2:-1]), parts[-1])


def parse_folder(text: str) -> FolderName:
    parts = _split(text)
    if len(parts) < 2:
        raise MalformedName(f"folder needs x.y and an application: {text!r}")
    ia, user = _split_identity(parts[0])
    return FolderName(ia, user, parts[1], tuple(parts[2:]))


def format_name(name: AnyName) -> str:
    return str(name)


def generate_segment(rng: random.Random) -> str:
    """Draw a fresh anonymized segment (128 random bits as lowercase hex)."""
    return f"{rng.getrandbits(128):032x}"


def parent_folder(name: AnyName) -> FolderName:
    if isinstance(name, ContentName):
        return name.folder
    if not name.folders:
        raise NoParent(f"{name} is an application prefix")
    return FolderName(name.ia, name.user, name.application, name.folders[:-1])


def is_prefix_of(folder: FolderName, name: AnyName) -> bool:
    mine, theirs = folder.segments, name.segments
    return len(mine) <= len(theirs) and theirs[: len(mine)] == mine


def tu_folder(folder: FolderName) -> FolderName:
    return folder.child(TU_SEGMENT)


def tu_head(folder: FolderName) -> ContentName:
    """Name of the genesis entry of ``folder``'s thread-update feed."""
    return tu_folder(folder).name(INDEX_SEGMENT)


def is_tu_name(name: ContentName) -> bool:
    return bool(name.folders) and name.folders[-1] == TU_SEGMENT


def tu_owner(name: ContentName) -> FolderName:
    """The folder whose thread-update feed contains ``name``."""
    if not is_tu_name(name):
        raise ValueError(f"{name} is not a thread-update entry")
    return FolderName(name.ia, name.user, name.application, name.folders[:-1])


def index_name(folder: FolderName) -> ContentName:
    return folder.application_prefix.name(INDEX_SEGMENT)
