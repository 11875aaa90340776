# Copyright 2025 Semantiva authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Check (default) or insert the Apache 2.0 license header in project sources.

    python scripts/license_headers.py          # exit 1 listing files without it
    python scripts/license_headers.py --fix    # prepend it where missing
"""

import argparse
import os
import re
import sys
from typing import Iterable, List

HEADER = """# Copyright 2025 Semantiva authors
#
# Licensed under the Apache License, Version 2.0 (the \"License\");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an \"AS IS\" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""

HEADER_PATTERN = re.compile("^" + re.escape(HEADER))

INCLUDE_DIRS: Iterable[str] = ["motiondps", "tests", "scripts"]
EXTENSIONS = (".py",)


def source_files(dirs: Iterable[str] = INCLUDE_DIRS) -> List[str]:
    found = []
    for dirpath in dirs:
        for root, _, files in os.walk(dirpath):
            found += [os.path.join(root, name) for name in sorted(files) if name.endswith(EXTENSIONS)]
    return sorted(found)


def has_header(content: str) -> bool:
    return HEADER_PATTERN.match(content) is not None


def insert_header(filepath: str) -> bool:
    """Prepend the header if missing; returns True if the file was modified."""
    with open(filepath, "r", encoding="utf-8") as f:
        content = f.read()
    if has_header(content):
        return False
    header = HEADER.strip() + "\n"
    with open(filepath, "w", encoding="utf-8") as f:
        f.write(header + ("\n" + content if content else ""))
    return True


def main(argv: List[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Check or insert license headers")
    parser.add_argument("--fix", action="store_true", help="Insert missing headers instead of failing")
    args = parser.parse_args(argv)

    if args.fix:
        changed = [path for path in source_files() if insert_header(path)]
        print(f"Total files updated: {len(changed)}")
        for path in changed:
            print(f" - {path}")
        return 0

    missing = []
    for path in source_files():
        with open(path, "r", encoding="utf-8") as f:
            if not has_header(f.read()):
                missing.append(path)
    if missing:
        print("Missing license header in:")
        for path in missing:
            print(f" - {path}")
        return 1
    print("All files contain the license header.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
