"""Commit-pinned data packages ("bricks"): a content-addressed local library,
hash-driven build pipelines, and a minimal registry for distributing them."""

from .errors import BricksError
from .installer import AssetCatalog, InstallResult, LibraryLayout, assets, install
from .model import (
    BrickRef,
    ContentHash,
    DependencySet,
    Lockfile,
    Manifest,
    parse_brick_ref,
    parse_dependencies,
    parse_lockfile,
    parse_manifest,
    serialize_dependencies,
    serialize_lockfile,
    serialize_manifest,
)
from .pipeline import RunReport, StageStatus, commit_outputs, plan, repro
from .registry import RegistryClient, RegistryEndpoint
from .store import CacheLayout, ContentStore, DirManifest, hash_bytes, hash_tree

__version__ = "0.1.0"

__all__ = [
    "AssetCatalog",
    "BrickRef",
    "BricksError",
    "CacheLayout",
    "ContentHash",
    "ContentStore",
    "DependencySet",
    "DirManifest",
    "InstallResult",
    "LibraryLayout",
    "Lockfile",
    "Manifest",
    "RegistryClient",
    "RegistryEndpoint",
    "RunReport",
    "StageStatus",
    "assets",
    "commit_outputs",
    "hash_bytes",
    "hash_tree",
    "install",
    "parse_brick_ref",
    "parse_dependencies",
    "parse_lockfile",
    "parse_manifest",
    "plan",
    "repro",
    "serialize_dependencies",
    "serialize_lockfile",
    "serialize_manifest",
    "__version__",
]
