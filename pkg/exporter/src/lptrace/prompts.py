"""Prompt templates for completion and multiple-choice questions.

Rendering is deterministic byte-exact substitution; the templates carry
the literal "\\n\\n" step-separation instruction and the boxed-answer
requirement, and are pinned by golden files in the test suite.
"""

from __future__ import annotations

COMPLETION = "completion"
MULTIPLE_CHOICE = "multiple_choice"

COMPLETION_TEMPLATE = (
    "Please answer the following problem using step-by-step reasoning.\n"
    "    Please separate your reasoning steps with two newline characters (\\n\\n).\n"
    "    Please must put your final answer within \\boxed{{}}.\n"
    "\n"
    "    Question: {question}"
)

MULTIPLE_CHOICE_TEMPLATE = (
    "This is a multiple-choice question.\n"
    "    Please answer the following problem using step-by-step reasoning.\n"
    "    Separate each reasoning step with two newline characters (\\n\\n).\n"
    "    You must put your final answer within \\boxed{{}}, such as \\boxed{{A}}, "
    "\\boxed{{B}}, \\boxed{{C}}, or \\boxed{{D}}. No other formats are allowed.\n"
    "\n"
    "    Question: {question}\n"
    "    \n"
    "    Choices:\n"
    "    A. {choice1}\n"
    "    B. {choice2}\n"
    "    C. {choice3}\n"
    "    D. {choice4}"
)


def render_prompt(kind: str, question: str, choices: list[str] | None = None) -> str:
    """Render the prompt for one question; multiple choice requires exactly 4 choices."""
    if kind == COMPLETION:
        rendered = COMPLETION_TEMPLATE.format(question=question)
    elif kind == MULTIPLE_CHOICE:
        if choices is None or len(choices) != 4:
            got = 0 if choices is None else len(choices)
            raise ValueError(f"multiple choice requires exactly 4 choices, got {got}")
        rendered = MULTIPLE_CHOICE_TEMPLATE.format(
            question=question, choice1=choices[0], choice2=choices[1],
            choice3=choices[2], choice4=choices[3])
    else:
        raise ValueError(f"unknown template kind {kind!r}")
    assert "\\boxed{" in rendered
    return rendered
