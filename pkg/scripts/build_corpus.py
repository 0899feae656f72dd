"""Regenerate tests/data/stdlib_docs.txt from the docstrings of the running Python's stdlib."""

import importlib
import inspect
import sys
from pathlib import Path

MODULES = """
os re json collections itertools functools argparse logging subprocess threading asyncio email
http.client urllib.request unittest typing dataclasses pathlib shutil tarfile zipfile csv datetime
decimal fractions statistics random string textwrap difflib heapq bisect socket ssl sqlite3 pickle
copy inspect ast dis tokenize enum abc contextlib io codecs locale gettext calendar time sched queue
multiprocessing concurrent.futures xml.etree.ElementTree html.parser smtplib imaplib ftplib wave pdb
doctest trace timeit cProfile tempfile glob fnmatch configparser optparse getopt struct array weakref
types operator math cmath numbers hashlib hmac secrets base64 binascii zlib gzip bz2 lzma mailbox
mimetypes uuid ipaddress selectors signal platform sysconfig warnings traceback gc pprint reprlib
shelve dbm pydoc venv zipimport importlib runpy code codeop symtable keyword token pyclbr py_compile
compileall filecmp stat fileinput linecache netrc plistlib quopri colorsys cmd shlex graphlib
zoneinfo contextvars tracemalloc faulthandler atexit builtins
""".split()


def collect() -> str:
    seen: set[str] = set()
    parts: list[str] = []

    def add(doc):
        if doc and doc not in seen:
            seen.add(doc)
            parts.append(doc)

    for name in MODULES:
        try:
            mod = importlib.import_module(name)
        except Exception:
            continue
        add(inspect.getdoc(mod))
        for attr, obj in sorted(vars(mod).items()):
            if attr.startswith("_") or getattr(obj, "__module__", None) != mod.__name__:
                continue
            if inspect.isclass(obj) or inspect.isfunction(obj):
                add(inspect.getdoc(obj))
            if inspect.isclass(obj):
                for meth_name, meth in sorted(vars(obj).items()):
                    if not meth_name.startswith("_") and inspect.isfunction(meth):
                        add(inspect.getdoc(meth))
    return "\n\n".join(parts) + "\n"


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "tests/data/stdlib_docs.txt"
    text = collect()
    out.write_text(text, encoding="utf-8")
    print(f"wrote {len(text.encode('utf-8'))} bytes to {out}")
