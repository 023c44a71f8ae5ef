"""Builds the expected moderator system prompt from its LaTeX typesetting.

Usage: golden_prompt.py SOURCE_TEX OUT
The roster and quiz below mirror tests/fixtures/canonical.jsonl (first passage,
three questions).
"""
import re
import sys

NAMES = ["Ethan", "Jordan", "Sophia", "Daniel"]
TITLE = "The Cat and the Buck"
BODY = ("A grey cat lived at the edge of Blue Hill. Every morning she watched the deer come down to drink. "
        "One day she followed the oldest buck into the forest, because he always knew where the fresh water was.")
QA = [
    ("Where did the grey cat live?", "At the edge of Blue Hill."),
    ("Why did the cat follow the oldest buck?", "Because he always knew where the fresh water was."),
    ("How do you think the buck felt about the cat following him?", "He was curious but not afraid."),
]


def template(tex):
    start = tex.index(r"\textbf{Role: Moderator")
    end = tex.index(r"\texttt{[passage and QA pairs]}") + len(r"\texttt{[passage and QA pairs]}")
    text = tex[start:end]
    text = re.sub(r"\\textbf\{([^}]*)\}", r"**\1**", text)
    lines = [line.rstrip() for line in text.split("\n")]
    out = []
    for line in lines:
        if line == "" and out and out[-1] == "":
            continue
        out.append(line)
    return "\n".join(out)


def main():
    tex = open(sys.argv[1], encoding="utf-8").read()
    t = template(tex)
    names = "\n".join(f"- {n}" for n in NAMES)
    quiz = f"Passage: {TITLE}\n\n{BODY}\n\nQuestions:\n"
    quiz += "".join(f"{i}. {q}\n   Answer: {a}\n" for i, (q, a) in enumerate(QA, 1))
    t = t.replace(r"\texttt{[list of user names]}", names)
    t = t.replace(r"\texttt{[passage and QA pairs]}", quiz)
    with open(sys.argv[2], "w", encoding="utf-8") as f:
        f.write(t)


if __name__ == "__main__":
    main()
