"""Batch figure rendering: redps-plots SPECFILE [SPECFILE ...].

Exit codes: 0 success, 1 bad spec/missing input, 2 render failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

from .figures import FigureSpecError, MissingColumnError, parse_figure_spec, render


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__)
        return 0 if argv else 1
    rc = 0
    for spec_path in argv:
        try:
            path = Path(spec_path)
            spec = parse_figure_spec(path.read_text(), base_dir=path.parent)
            out = render(spec)
            print(f"{spec.kind}: {out}")
        except (FigureSpecError, MissingColumnError, FileNotFoundError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            rc = max(rc, 1)
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            print(f"render error: {exc}", file=sys.stderr)
            rc = max(rc, 2)
    return rc


if __name__ == "__main__":
    sys.exit(main())
