from collections import UserString
from pathlib import Path
from typing import Optional


class VersionProxy(UserString):
    """
    Lazily resolved package version backed by setuptools-scm.

    The version string is looked up the first time it is used, not at import,
    so ``import raymap`` stays cheap. Lookup order:

    1. A git checkout or git archive next to the package: ask setuptools-scm.
    2. The ``_version.py`` file written at build time.
    3. ``0.0.unknown``.

    The resolved string is also what the command line records as the
    ``git_describe`` field of every provenance sidecar.
    """
    def __init__(self):
        self._version = None

    def _resolve(self) -> Optional[str]:
        repo_root = Path(__file__).resolve().parent.parent
        if (repo_root / ".git").exists() or (repo_root / ".git_archival.txt").exists():
            try:
                from setuptools_scm import get_version
                return get_version(root="..", relative_to=__file__)
            except (ImportError, LookupError):
                ...

        try:
            from ._version import version  # noqa: F401
            return version
        except ImportError:
            ...

        return None

    @property
    def data(self) -> str:
        if self._version is None:
            self._version = self._resolve() or '0.0.unknown'
        return self._version


__version__ = version = VersionProxy()
