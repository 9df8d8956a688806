"""Hostname -> organization map for first-party vs third-party reporting."""

import logging
from pathlib import Path
from typing import Dict, Mapping, Optional

logger = logging.getLogger("flowtap.analyzer.entities")


class OrganizationMap:
    """Longest-suffix match over ``domain = organization`` entries."""

    def __init__(self, domains: Optional[Mapping[str, str]] = None):
        self._domains: Dict[str, str] = {
            d.lower().strip(".").strip(): org for d, org in (domains or {}).items()
        }

    @classmethod
    def from_file(cls, path: Path) -> "OrganizationMap":
        domains: Dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'domain = organization'")
            domain, org = (part.strip() for part in line.split("=", 1))
            domains[domain] = org
        logger.info("Loaded %d organization domains from %s", len(domains), path)
        return cls(domains)

    def lookup(self, hostname: Optional[str]) -> Optional[str]:
        if not hostname:
            return None
        labels = hostname.lower().strip(".").split(".")
        for i in range(len(labels)):
            org = self._domains.get(".".join(labels[i:]))
            if org is not None:
                return org
        return None

    def __len__(self) -> int:
        return len(self._domains)
