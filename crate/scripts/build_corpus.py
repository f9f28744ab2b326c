#!/usr/bin/env python3
"""Builds data/corpus.txt from docstrings in the CPython standard library.

Each docstring becomes one document; documents are separated by a blank line.
Output is deterministic for a given Python installation.
"""
import ast
import inspect
import pathlib
import sys

LIMIT = 1_000_000


def docstrings(path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node, clean=True)
            if doc:
                yield doc


def main():
    root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "/usr/lib/python3.10")
    out = pathlib.Path(sys.argv[2] if len(sys.argv) > 2 else "data/corpus.txt")
    seen = set()
    docs = []
    total = 0
    files = sorted(p for p in root.rglob("*.py")
                   if not any(part in ("test", "tests", "idle_test", "site-packages", "dist-packages")
                              for part in p.parts))
    for path in files:
        for doc in docstrings(path):
            # Collapse each docstring into single-spaced lines; blank lines separate documents.
            lines = [" ".join(l.split()) for l in inspect.cleandoc(doc).splitlines()]
            text = "\n".join(l for l in lines if l)
            if len(text) < 80 or text in seen:
                continue
            seen.add(text)
            docs.append(text)
            total += len(text.encode("utf-8")) + 2
            if total >= LIMIT:
                break
        if total >= LIMIT:
            break
    out.write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    print(f"{len(docs)} documents, {out.stat().st_size} bytes -> {out}")


if __name__ == "__main__":
    main()
