"""Micro-VM appliance delivery: a content-addressed snapshot repository served
over HTTP, a caching on-demand client, a copy-on-write union root and the
boot/update orchestration around them."""

from __future__ import annotations

__version__ = "0.1.0"
