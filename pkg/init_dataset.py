#!/usr/bin/env python
"""
数据集初始化脚本
Run this script to create the dataset layout and verify stored artifacts
"""
import argparse
import sys
from collections import Counter
from typing import Dict, List, Optional, Sequence

from ci_replay.errors import ArtifactNotFoundError, DigestMismatchError, ReplayError
from ci_replay.store import ArtifactKind, ArtifactStore


def verify_dataset(store: ArtifactStore) -> Dict:
    """检查清单引用的所有制品 - re-hash every artifact the manifest references"""
    manifest = store.manifest()
    problems: List[str] = []
    checked = set()
    for row in manifest:
        for role, aid in row.artifacts.items():
            if aid in checked:
                continue
            checked.add(aid)
            try:
                store.get(aid)
            except ArtifactNotFoundError:
                problems.append(f"missing {aid} ({row.stage.value} run {row.run.run_id}, {role})")
            except DigestMismatchError:
                problems.append(f"corrupt {aid} ({row.stage.value} run {row.run.run_id}, {role})")
    on_disk = Counter()
    for kind in ArtifactKind:
        kind_dir = store.root / "artifacts" / kind.value
        if kind_dir.is_dir():
            on_disk[kind.value] = sum(1 for p in kind_dir.glob("*/*") if not p.name.startswith(".tmp-"))
    return {
        "rows": Counter(row.stage.value for row in manifest),
        "artifacts": on_disk,
        "referenced": len(checked),
        "problems": problems,
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Create and verify a ci-replay dataset directory")
    parser.add_argument("dataset", nargs="?", default="dataset", help="dataset root (default: dataset)")
    args = parser.parse_args(argv)

    print("=" * 60)
    print("ci-replay - Dataset Initialization")
    print("=" * 60)

    store = ArtifactStore(args.dataset)
    try:
        store.init()
        header = store.check_header()
        print(f"\nDataset: {store.root.resolve()}")
        print(f"Format version: {header['format_version']}  hash: {header['hash']}")

        # 验证数据集
        print("\nVerifying dataset...")
        summary = verify_dataset(store)
    except ReplayError as e:
        print(f"\n[ERROR] {e}")
        return 1

    print(f"\nManifest rows: {dict(summary['rows']) or 0}")
    print(f"Artifacts on disk: {dict(summary['artifacts']) or 0}")
    print(f"Referenced artifacts checked: {summary['referenced']}")
    for problem in summary["problems"]:
        print(f"  - {problem}")

    print("\n" + "=" * 60)
    if summary["problems"]:
        print(f"Dataset has {len(summary['problems'])} problem(s)!")
        print("=" * 60)
        return 1
    print("Dataset initialization completed!")
    print("=" * 60)
    return 0


if __name__ == "__main__":
    sys.exit(main())
