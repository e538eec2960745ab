"""main

Backward-compatible command entrypoint for the experiment CLI.
The implementation lives in the harness package for testable modules.
"""

from harness.app import main

if __name__ == "__main__":
    raise SystemExit(main())
