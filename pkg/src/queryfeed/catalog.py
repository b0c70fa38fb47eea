"""Catalog records and line-delimited JSON persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict


class CatalogError(ValueError):
    pass


@dataclass
class Item:
    item_id: str
    title: str
    category: str
    deal: bool = False
    release_date: int = 0
    popularity: int = 0

    def metadata_text(self) -> str:
        return f"{self.title} | {self.category}"


def save_catalog(path, items: list[Item], meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for item in items:
            fh.write(json.dumps(asdict(item), sort_keys=True) + "\n")


def load_catalog(path) -> tuple[list[Item], dict]:
    items: list[Item] = []
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                meta = rec["_meta"]
                continue
            items.append(Item(**rec))
    if not items:
        raise CatalogError(f"no items in catalog {path}")
    return items, meta


def by_id(items: list[Item]) -> dict[str, Item]:
    out = {it.item_id: it for it in items}
    if len(out) != len(items):
        raise CatalogError("duplicate item ids in catalog")
    return out
