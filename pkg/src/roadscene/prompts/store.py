"""Append-only, versioned prompt store: one front-matter file per bundle.

File layout (``<task>@<version>.md``)::

    ---
    task: wetness-rain
    version: 1.0.0
    origin: curated
    anchors: [...]
    simple_text: ...
    ---
    <CoT prompt text>

Curated bundles shipped with the package are always visible underneath the
user store and can never be overwritten.
"""

from __future__ import annotations

import threading
from importlib import resources
from pathlib import Path
from typing import Iterable

import yaml

from ..errors import PromptStoreError, ValidationFailed
from ..taxonomy import Task, TaskKind
from .compiler import Origin, PromptBundle, version_key

LATEST = "latest"


def render_bundle(bundle: PromptBundle) -> str:
    meta = {
        "task": bundle.task.value,
        "version": bundle.version,
        "origin": bundle.origin.value,
        "anchors": list(bundle.anchors),
        "simple_text": bundle.simple_text,
    }
    front = yaml.safe_dump(meta, sort_keys=False, allow_unicode=True, width=1000)
    return f"---\n{front}---\n{bundle.cot_text.rstrip()}\n"


def parse_bundle(text: str, origin_hint: str = "<string>") -> PromptBundle:
    if not text.startswith("---\n"):
        raise PromptStoreError(f"{origin_hint}: missing front matter")
    try:
        front, body = text[4:].split("\n---\n", 1)
        meta = yaml.safe_load(front) or {}
        bundle = PromptBundle(
            task=TaskKind(meta["task"]),
            version=str(meta["version"]),
            origin=Origin(meta.get("origin", Origin.CURATED_TEMPLATE.value)),
            cot_text=body.strip(),
            simple_text=meta["simple_text"],
            anchors=tuple(meta.get("anchors") or ()),
        )
    except ValidationFailed as exc:
        raise PromptStoreError(f"{origin_hint}: stored CoT prompt fails validation: {exc.missing}") from exc
    except (ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise PromptStoreError(f"{origin_hint}: unreadable bundle ({exc})") from exc
    return bundle


def bundle_filename(task: TaskKind, version: str) -> str:
    return f"{task.value}@{version}.md"


def _builtin_texts() -> Iterable[tuple[str, str]]:
    root = resources.files("roadscene.prompts").joinpath("curated")
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".md"):
            yield f"builtin:{entry.name}", entry.read_text("utf-8")


class PromptStore:
    """Bundles keyed by (task, version). Reads are concurrent, writes serialized."""

    def __init__(self, root: str | Path | None = None, include_builtin: bool = True):
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._bundles: dict[tuple[TaskKind, str], PromptBundle] = {}
        self._builtin: set[tuple[TaskKind, str]] = set()
        if include_builtin:
            for name, text in _builtin_texts():
                bundle = parse_bundle(text, name)
                key = (bundle.task, bundle.version)
                self._bundles[key] = bundle
                self._builtin.add(key)
        if self.root is not None and self.root.is_dir():
            for path in sorted(self.root.glob("*.md")):
                bundle = parse_bundle(path.read_text("utf-8"), str(path))
                if path.name != bundle_filename(bundle.task, bundle.version):
                    raise PromptStoreError(f"{path}: file name does not match its task/version")
                self._bundles.setdefault((bundle.task, bundle.version), bundle)

    def versions(self, task: Task | TaskKind) -> list[str]:
        kind = task.kind if isinstance(task, Task) else task
        with self._lock:
            found = [v for (k, v) in self._bundles if k is kind]
        return sorted(found, key=version_key)

    def get(self, task: Task | TaskKind, version: str = LATEST) -> PromptBundle:
        kind = task.kind if isinstance(task, Task) else task
        if version == LATEST:
            versions = self.versions(kind)
            if not versions:
                raise PromptStoreError(f"no prompt bundle for task {kind.value}")
            version = versions[-1]
        with self._lock:
            bundle = self._bundles.get((kind, version))
        if bundle is None:
            raise PromptStoreError(f"no prompt bundle {kind.value}@{version}")
        return bundle

    def all(self) -> list[PromptBundle]:
        with self._lock:
            bundles = list(self._bundles.values())
        return sorted(bundles, key=lambda b: (b.task.value, b.version_key))

    def put(self, bundle: PromptBundle) -> Path | None:
        """Persist a new version. Re-putting an identical bundle is a no-op."""
        key = (bundle.task, bundle.version)
        with self._lock:
            existing = self._bundles.get(key)
            if existing is not None:
                if existing.cot_text == bundle.cot_text and existing.origin == bundle.origin:
                    return self._path(bundle) if key not in self._builtin else None
                raise PromptStoreError(f"{bundle.task.value}@{bundle.version} already exists with different content")
            path = None
            if self.root is not None:
                self.root.mkdir(parents=True, exist_ok=True)
                path = self._path(bundle)
                try:
                    with open(path, "x", encoding="utf-8") as fh:
                        fh.write(render_bundle(bundle))
                except FileExistsError:
                    raise PromptStoreError(f"{path} already exists") from None
            self._bundles[key] = bundle
            return path

    def _path(self, bundle: PromptBundle) -> Path:
        assert self.root is not None
        return self.root / bundle_filename(bundle.task, bundle.version)

    def next_version(self, task: Task | TaskKind) -> str:
        versions = self.versions(task)
        if not versions:
            return "1.0.0"
        major, minor, _ = version_key(versions[-1])
        return f"{major}.{minor + 1}.0"

    def self_check(self) -> list[str]:
        """Re-validate every bundle; returns problems (empty when healthy)."""
        from .compiler import validate_cot

        problems = []
        for bundle in self.all():
            result = validate_cot(bundle.task, bundle.cot_text)
            if not result.ok:
                problems.append(f"{bundle.task.value}@{bundle.version}: missing {list(result.missing)}")
        return problems

    def export(self, task: Task | TaskKind, version: str, dest: str | Path) -> Path:
        bundle = self.get(task, version)
        dest = Path(dest)
        if dest.is_dir():
            dest = dest / bundle_filename(bundle.task, bundle.version)
        dest.write_text(render_bundle(bundle), encoding="utf-8")
        return dest

    def import_file(self, path: str | Path) -> PromptBundle:
        bundle = parse_bundle(Path(path).read_text("utf-8"), str(path))
        self.put(bundle)
        return bundle
