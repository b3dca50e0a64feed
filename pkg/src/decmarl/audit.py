"""Access auditing for the privacy constraint.

Parameter-owning objects report reads through :func:`touch`; training loops
declare which agent is currently computing with :func:`acting_as`. When no
:class:`AccessAudit` is installed both calls are no-ops.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

_active: "AccessAudit | None" = None


@dataclass
class AccessAudit:
    current: int | None = None
    reads: list = field(default_factory=list)  # (actor, owner, what)
    messages: list = field(default_factory=list)  # (sender, receiver, payload kind)

    def violations(self):
        return [r for r in self.reads if r[0] is not None and r[0] != r[1]]

    def unattributed(self):
        return [r for r in self.reads if r[0] is None]


def install(audit: AccessAudit | None) -> None:
    global _active
    _active = audit


@contextlib.contextmanager
def recording():
    audit = AccessAudit()
    prev = _active
    install(audit)
    try:
        yield audit
    finally:
        install(prev)


@contextlib.contextmanager
def acting_as(agent: int | None):
    if _active is None:
        yield
        return
    prev = _active.current
    _active.current = agent
    try:
        yield
    finally:
        _active.current = prev


def touch(owner, what: str) -> None:
    if _active is not None and owner is not None:
        _active.reads.append((_active.current, owner, what))


def message(sender: int, receiver: int, kind: str) -> None:
    if _active is not None:
        _active.messages.append((sender, receiver, kind))
