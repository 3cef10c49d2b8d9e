from __future__ import annotations

import pytest

from sparkevo.program_model import TagConfig

HEADER = ("# candidate architecture",)
MID = ("def build_model():", "    return op_width")
FOOTER = ("def evaluate_contract():", "    return out")


def build_program(
    op_body: tuple[str, ...] = ("op_width = 4", "op_gain = 2"),
    ac_body: tuple[str, ...] = ("step = op_gain", "out = step"),
    header: tuple[str, ...] = HEADER,
    mid: tuple[str, ...] = MID,
    footer: tuple[str, ...] = FOOTER,
    tags: TagConfig | None = None,
    final_newline: bool = True,
) -> str:
    """Assemble a tagged program from region bodies and scaffolding."""
    tags = tags or TagConfig()
    lines = (
        list(header)
        + [tags.operator_open, *op_body, tags.operator_close]
        + list(mid)
        + [tags.action_open, *ac_body, tags.action_close]
        + list(footer)
    )
    return "\n".join(lines) + ("\n" if final_newline else "")


@pytest.fixture
def tags() -> TagConfig:
    return TagConfig()


@pytest.fixture
def base_program() -> str:
    return build_program()
