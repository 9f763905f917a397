"""``python -m byzopt`` entry point."""

from .cli import main

raise SystemExit(main())
